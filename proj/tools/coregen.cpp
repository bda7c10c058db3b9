// Command-line front end: ingest, vocab, dedup, train, generate, eval,
// nngen, sweep, report. Every run writes a manifest with the fully resolved
// configuration and input digests so results can be reproduced exactly.

#include "coregen/baseline.hpp"
#include "coregen/checkpoint.hpp"
#include "coregen/corpus.hpp"
#include "coregen/decode.hpp"
#include "coregen/metrics.hpp"
#include "coregen/model.hpp"
#include "coregen/tasks.hpp"
#include "coregen/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace coregen;

namespace {

constexpr const char* kVersion = "0.1.0";

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::uint64_t hash = 0xCBF29CE484222325ULL;
  char buffer[1 << 14];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      hash ^= static_cast<unsigned char>(buffer[i]);
      hash *= 0x100000001B3ULL;
    }
  }
  return hash;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path()) {
    fs::create_directories(fs::path(path).parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path);
}

void write_token_lines(const std::string& path, const TokenCorpus& lines) {
  std::string text;
  for (const Tokens& line : lines) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i) text += ' ';
      text += line[i];
    }
    text += '\n';
  }
  write_text(path, text);
}

// One manifest per run: command, resolved config, input digests, artifacts.
struct ManifestWriter {
  ordered_json j;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  ManifestWriter(const std::string& command, CLI::App* sub) {
    j["command"] = command;
    j["version"] = kVersion;
    ordered_json config = ordered_json::object();
    for (const CLI::Option* opt : sub->get_options()) {
      const std::string name = opt->get_lnames().empty() ? opt->get_name()
                                                         : opt->get_lnames()[0];
      if (name == "help") continue;
      if (!opt->results().empty()) {
        config[name] = opt->results().size() == 1 ? ordered_json(opt->results()[0])
                                                  : ordered_json(opt->results());
      } else {
        config[name] = opt->get_default_str();
      }
    }
    j["config"] = config;
    j["inputs"] = ordered_json::object();
    j["artifacts"] = ordered_json::array();
  }

  void input(const std::string& path) {
    if (!path.empty()) j["inputs"][path] = hex64(fnv1a_file(path));
  }
  void artifact(const std::string& path) { j["artifacts"].push_back(path); }

  void write(const std::string& path) {
    j["wall_clock_sec"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    write_text(path, j.dump(2) + "\n");
  }
};

struct DataArgs {
  std::string train_diff, train_msg;
  std::string valid_diff, valid_msg;
  std::string test_diff, test_msg;

  void add_train(CLI::App* app, bool required = true) {
    auto* a = app->add_option("--train-diff", train_diff, "training diff file");
    auto* b = app->add_option("--train-msg", train_msg, "training msg file");
    if (required) {
      a->required();
      b->required();
    }
  }
  void add_valid(CLI::App* app, bool required = false) {
    auto* a = app->add_option("--valid-diff", valid_diff, "validation diff file");
    auto* b = app->add_option("--valid-msg", valid_msg, "validation msg file");
    if (required) {
      a->required();
      b->required();
    }
  }
  void add_test(CLI::App* app, bool required = false) {
    auto* a = app->add_option("--test-diff", test_diff, "test diff file");
    auto* b = app->add_option("--test-msg", test_msg, "test msg file");
    if (required) {
      a->required();
      b->required();
    }
  }
};

struct ModelArgs {
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int d_ff = 0;
  int max_len = 256;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  bool tie_output = false;

  void add(CLI::App* app) {
    app->add_option("--d-model", d_model, "embedding width")->capture_default_str();
    app->add_option("--layers", layers, "encoder/decoder layer count")
        ->capture_default_str();
    app->add_option("--heads", heads, "attention heads")->capture_default_str();
    app->add_option("--d-ff", d_ff, "feed-forward width (0 = 4*d_model)")
        ->capture_default_str();
    app->add_option("--max-len", max_len, "maximum sequence length")
        ->capture_default_str();
    app->add_option("--dropout", dropout, "dropout rate")->capture_default_str();
    app->add_option("--label-smoothing", label_smoothing, "label smoothing")
        ->capture_default_str();
    app->add_flag("--tie-output", tie_output, "tie output projection to embeddings");
  }

  ModelConfig config(int vocab_size) const {
    ModelConfig mc;
    mc.d_model = d_model;
    mc.n_layers = layers;
    mc.n_heads = heads;
    mc.d_ff = d_ff;
    mc.vocab_size = vocab_size;
    mc.max_len = max_len;
    mc.dropout_rate = dropout;
    mc.label_smoothing = label_smoothing;
    mc.tie_output = tie_output;
    return mc;
  }
};

struct TrainArgs {
  int batch_size = 64;
  int warmup = 4000;
  int epochs_stage1 = 10;
  int epochs_stage2 = 10;
  double label_fraction = 1.0;
  double mask_rate = 0.5;
  bool icsm = false;
  int icsm_cap = 8;
  std::uint64_t seed = 1;
  int max_steps_stage1 = 0;
  int max_steps_stage2 = 0;
  int val_every = 0;
  int val_cap = 200;
  int min_freq = 1;
  int max_vocab = 0;

  void add(CLI::App* app) {
    app->add_option("--batch-size", batch_size)->capture_default_str();
    app->add_option("--warmup", warmup, "lr warmup steps")->capture_default_str();
    app->add_option("--epochs-stage1", epochs_stage1)->capture_default_str();
    app->add_option("--epochs-stage2", epochs_stage2)->capture_default_str();
    app->add_option("--label-fraction", label_fraction,
                    "fraction of labeled pairs used in stage two")
        ->capture_default_str();
    app->add_option("--mask-rate", mask_rate)->capture_default_str();
    app->add_flag("--icsm", icsm, "add in-statement mask samples");
    app->add_option("--icsm-cap", icsm_cap, "in-statement samples per commit")
        ->capture_default_str();
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--max-steps-stage1", max_steps_stage1, "0 = uncapped")
        ->capture_default_str();
    app->add_option("--max-steps-stage2", max_steps_stage2, "0 = uncapped")
        ->capture_default_str();
    app->add_option("--val-every", val_every, "epochs between validation BLEU")
        ->capture_default_str();
    app->add_option("--val-cap", val_cap)->capture_default_str();
    app->add_option("--min-freq", min_freq, "vocabulary frequency cutoff")
        ->capture_default_str();
    app->add_option("--max-vocab", max_vocab, "vocabulary size cap (0 = none)")
        ->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig tc;
    tc.batch_size = batch_size;
    tc.warmup_steps = warmup;
    tc.epochs_stage1 = epochs_stage1;
    tc.epochs_stage2 = epochs_stage2;
    tc.label_fraction = label_fraction;
    tc.mask_rate = mask_rate;
    tc.icsm_enabled = icsm;
    tc.icsm_max_per_commit = icsm_cap;
    tc.seed = seed;
    tc.max_steps_stage1 = max_steps_stage1;
    tc.max_steps_stage2 = max_steps_stage2;
    tc.val_every = val_every;
    tc.val_cap = val_cap;
    return tc;
  }
};

std::vector<TokenizedCommit> structure_all(const std::vector<CommitRecord>& records) {
  std::vector<TokenizedCommit> out;
  out.reserve(records.size());
  for (const auto& rec : records) out.push_back(structure_commit(rec));
  return out;
}

ordered_json split_stats(const std::vector<CommitRecord>& records) {
  long long diff_tokens = 0, msg_tokens = 0, explicit_changes = 0;
  for (const auto& rec : records) {
    diff_tokens += static_cast<long long>(rec.diff_tokens.size());
    msg_tokens += static_cast<long long>(rec.msg_tokens.size());
    if (structure_commit(rec).category == ChangeCategory::ExplicitChange) {
      ++explicit_changes;
    }
  }
  return {{"records", records.size()},
          {"diff_tokens", diff_tokens},
          {"msg_tokens", msg_tokens},
          {"explicit_changes", explicit_changes},
          {"implicit_changes",
           static_cast<long long>(records.size()) - explicit_changes}};
}

void dump_samples(const std::string& path, const std::vector<StageOneSample>& samples) {
  std::string text;
  for (const auto& s : samples) {
    ordered_json j;
    j["task"] = stage_one_task_name(s.task);
    j["origin_id"] = s.origin_id;
    if (s.mask_span) {
      j["mask_span"] = {{"line", s.mask_span->line},
                        {"start", s.mask_span->start},
                        {"end", s.mask_span->end}};
    } else {
      j["mask_span"] = nullptr;
    }
    j["source"] = s.source;
    j["target"] = s.target;
    text += j.dump();
    text += '\n';
  }
  write_text(path, text);
}

TokenCorpus generate_all(const ParameterStore& params, const Vocabulary& vocab,
                         const std::vector<CommitRecord>& records,
                         const DecodeConfig& decode) {
  TokenCorpus out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    std::vector<TokenId> src = vocab.encode(rec.diff_tokens);
    if (static_cast<int>(src.size()) > params.config.max_len) {
      src.resize(static_cast<std::size_t>(params.config.max_len));
    }
    out.push_back(vocab.decode(generate(params, params.config, src, decode)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// train command plumbing, shared with sweep

struct TrainInputs {
  std::vector<CommitRecord> train_records;
  std::vector<TokenizedCommit> train_commits;
  std::vector<CommitRecord> valid_records;
  Vocabulary vocab;
};

TrainInputs load_train_inputs(const DataArgs& data, int min_freq, int max_vocab) {
  TrainInputs in;
  in.train_records = load_split(data.train_diff, data.train_msg, Split::Train);
  in.train_commits = structure_all(in.train_records);
  if (!data.valid_diff.empty()) {
    in.valid_records = load_split(data.valid_diff, data.valid_msg, Split::Valid);
  }
  in.vocab = build_vocabulary(in.train_records, min_freq, max_vocab);
  return in;
}

struct TrainOutcome {
  ParameterStore params;
  TrainingLog log;
  long long stage1_steps = 0;
  long long stage2_steps = 0;
};

TrainOutcome run_training(const std::string& stage, const TrainInputs& in,
                          const ModelConfig& model, const TrainConfig& config,
                          const std::string& init_path,
                          const std::string& stage1_ckpt_out) {
  TrainContext ctx;
  ctx.vocab = &in.vocab;
  ctx.train = &in.train_commits;
  ctx.valid = in.valid_records.empty() ? nullptr : &in.valid_records;
  ctx.model = model;
  ctx.config = config;

  TrainOutcome out;
  if (stage == "stage1") {
    out.params = train_stage_one(ctx, out.log);
  } else if (stage == "stage2") {
    if (init_path.empty()) {
      throw Error(ErrorCode::InvalidConfig, "--init is required for stage2");
    }
    ParameterStore init = load_checkpoint(init_path, &model);
    if (init.stage == StageTag::StageI) init = transfer_parameters(init);
    out.params = train_stage_two(ctx, std::move(init), out.log);
  } else if (stage == "two-stage") {
    ParameterStore stage1 = train_stage_one(ctx, out.log);
    if (!stage1_ckpt_out.empty()) save_checkpoint(stage1, stage1_ckpt_out);
    out.params = train_stage_two(ctx, transfer_parameters(stage1), out.log);
  } else if (stage == "scratch-stage2") {
    out.params = train_stage_two(ctx, init_parameters(model, config.seed), out.log);
  } else if (stage == "hybrid") {
    TrainConfig hybrid_config = config;
    hybrid_config.hybrid = true;
    ctx.config = hybrid_config;
    out.params = train_hybrid(ctx, out.log);
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown stage: " + stage);
  }
  for (const auto& s : out.log.steps()) {
    if (s.stage == "stage1") ++out.stage1_steps;
    else ++out.stage2_steps;
  }
  return out;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const DataArgs& data, const std::string& out_path, CLI::App* sub) {
  ManifestWriter manifest("ingest", sub);
  ordered_json report;
  manifest.input(data.train_diff);
  manifest.input(data.train_msg);
  report["train"] =
      split_stats(load_split(data.train_diff, data.train_msg, Split::Train));
  if (!data.valid_diff.empty()) {
    manifest.input(data.valid_diff);
    manifest.input(data.valid_msg);
    report["valid"] =
        split_stats(load_split(data.valid_diff, data.valid_msg, Split::Valid));
  }
  if (!data.test_diff.empty()) {
    manifest.input(data.test_diff);
    manifest.input(data.test_msg);
    report["test"] =
        split_stats(load_split(data.test_diff, data.test_msg, Split::Test));
  }
  const std::string text = report.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    manifest.artifact(out_path);
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

int cmd_vocab(const DataArgs& data, const std::string& out_path, int min_freq,
              int max_vocab, CLI::App* sub) {
  ManifestWriter manifest("vocab", sub);
  manifest.input(data.train_diff);
  manifest.input(data.train_msg);
  const auto records = load_split(data.train_diff, data.train_msg, Split::Train);
  const Vocabulary vocab = build_vocabulary(records, min_freq, max_vocab);
  vocab.save(out_path);
  manifest.artifact(out_path);
  manifest.write(out_path + ".manifest.json");
  std::cout << "vocabulary size " << vocab.size() << " (" << kNumSentinels
            << " sentinels + " << vocab.size() - kNumSentinels << " tokens)\n";
  return 0;
}

int cmd_dedup(const DataArgs& data, const std::string& out_path,
              const std::string& filter_mode, const std::string& filtered_dir,
              CLI::App* sub) {
  ManifestWriter manifest("dedup", sub);
  for (const auto& p : {data.train_diff, data.train_msg, data.valid_diff,
                        data.valid_msg, data.test_diff, data.test_msg}) {
    manifest.input(p);
  }
  const auto train = load_split(data.train_diff, data.train_msg, Split::Train);
  const auto valid = load_split(data.valid_diff, data.valid_msg, Split::Valid);
  const auto test = load_split(data.test_diff, data.test_msg, Split::Test);
  const DedupReport report = dedup_analyze(train, valid, test);

  ordered_json j = ordered_json::parse(report.to_json());
  j["filter_mode"] = filter_mode;
  if (filter_mode != "none") {
    const DedupFilterMode mode = filter_mode == "drop-identical-code"
                                     ? DedupFilterMode::DropIdenticalCode
                                     : DedupFilterMode::DropCompletelyIdentical;
    const FilteredSplits filtered = dedup_filter(train, valid, test, mode);
    j["filtered"] = {{"valid_records", filtered.valid.size()},
                     {"test_records", filtered.test.size()}};
    if (!filtered_dir.empty()) {
      auto dump = [&](const std::vector<CommitRecord>& records,
                      const std::string& name) {
        TokenCorpus diffs, msgs;
        for (const auto& rec : records) {
          diffs.push_back(rec.diff_tokens);
          msgs.push_back(rec.msg_tokens);
        }
        write_token_lines(filtered_dir + "/" + name + ".diff", diffs);
        write_token_lines(filtered_dir + "/" + name + ".msg", msgs);
        manifest.artifact(filtered_dir + "/" + name + ".diff");
        manifest.artifact(filtered_dir + "/" + name + ".msg");
      };
      dump(filtered.valid, "valid");
      dump(filtered.test, "test");
    }
  }
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    manifest.artifact(out_path);
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

int cmd_train(const std::string& stage, const DataArgs& data, const ModelArgs& margs,
              const TrainArgs& targs, const std::string& out_dir,
              const std::string& init_path, const std::string& dump_samples_path,
              CLI::App* sub) {
  ManifestWriter manifest("train", sub);
  for (const auto& p :
       {data.train_diff, data.train_msg, data.valid_diff, data.valid_msg}) {
    if (!p.empty()) manifest.input(p);
  }
  if (!init_path.empty()) manifest.input(init_path);

  const TrainInputs in = load_train_inputs(data, targs.min_freq, targs.max_vocab);
  const ModelConfig model = margs.config(in.vocab.size());
  const TrainConfig config = targs.config();

  fs::create_directories(out_dir);
  const std::string vocab_path = out_dir + "/vocab.txt";
  in.vocab.save(vocab_path);
  manifest.artifact(vocab_path);

  if (!dump_samples_path.empty()) {
    StageOneOptions options;
    options.policy.mask_rate = config.mask_rate;
    options.icsm_enabled = config.icsm_enabled;
    options.icsm_max_per_commit = config.icsm_max_per_commit;
    dump_samples(dump_samples_path,
                 build_stage_one_dataset(in.train_commits, options,
                                         mix64(config.seed, 0x51D1), 0));
    manifest.artifact(dump_samples_path);
  }

  const bool runs_stage1 = stage == "stage1" || stage == "two-stage";
  const std::string stage1_ckpt =
      stage == "two-stage" ? out_dir + "/checkpoint_stage1.cgck" : "";
  TrainOutcome outcome = run_training(stage, in, model, config, init_path, stage1_ckpt);

  const std::string ckpt_path = out_dir + "/checkpoint_final.cgck";
  const std::string log_path = out_dir + "/train_log.jsonl";
  save_checkpoint(outcome.params, ckpt_path);
  outcome.log.write_jsonl(log_path);
  manifest.artifact(ckpt_path);
  if (!stage1_ckpt.empty()) manifest.artifact(stage1_ckpt);
  manifest.artifact(log_path);

  manifest.j["stage"] = stage;
  manifest.j["vocab_size"] = in.vocab.size();
  manifest.j["parameter_count"] = outcome.params.parameter_count();
  manifest.j["seed"] = config.seed;
  if (runs_stage1) {
    manifest.j["epochs_stage1"] = config.epochs_stage1;
    manifest.j["stage1_steps"] = outcome.stage1_steps;
  }
  if (stage != "stage1") {
    manifest.j["epochs_stage2"] = config.epochs_stage2;
    manifest.j["stage2_steps"] = outcome.stage2_steps;
  }
  manifest.write(out_dir + "/manifest.json");
  std::cout << "final checkpoint: " << ckpt_path << " (stage tag "
            << stage_tag_name(outcome.params.stage) << ")\n";
  return 0;
}

int cmd_generate(const std::string& ckpt_path, const std::string& vocab_path,
                 const std::string& input_path, const std::string& out_path,
                 const std::string& strategy, int beam_size, int gen_max_len,
                 double length_penalty, CLI::App* sub) {
  ManifestWriter manifest("generate", sub);
  manifest.input(ckpt_path);
  manifest.input(vocab_path);
  manifest.input(input_path);
  const ParameterStore params = load_checkpoint(ckpt_path);
  const Vocabulary vocab = Vocabulary::load(vocab_path);
  if (vocab.size() != params.config.vocab_size) {
    throw Error(ErrorCode::ShapeMismatch,
                "vocabulary size does not match the checkpoint");
  }
  DecodeConfig decode;
  decode.strategy = strategy == "beam" ? DecodeStrategy::Beam : DecodeStrategy::Greedy;
  decode.beam_size = beam_size;
  decode.max_len = gen_max_len;
  decode.length_penalty = length_penalty;

  const auto queries = load_diff_file(input_path, Split::Test);
  const TokenCorpus messages = generate_all(params, vocab, queries, decode);
  write_token_lines(out_path, messages);
  manifest.artifact(out_path);
  manifest.write(out_path + ".manifest.json");
  return 0;
}

int cmd_eval(const std::string& cand_path, const std::string& ref_path,
             const std::string& out_path, CLI::App* sub) {
  ManifestWriter manifest("eval", sub);
  manifest.input(cand_path);
  manifest.input(ref_path);
  const MetricReport report = evaluate_corpus_files(cand_path, ref_path);
  const std::string text = report.to_json() + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    manifest.artifact(out_path);
    manifest.write(out_path + ".manifest.json");
    std::cout << text;
  }
  return 0;
}

int cmd_nngen(const std::string& train_pair, const std::string& query_path,
              const std::string& out_path, int k, CLI::App* sub) {
  ManifestWriter manifest("nngen", sub);
  const auto comma = train_pair.find(',');
  if (comma == std::string::npos) {
    throw Error(ErrorCode::InvalidConfig, "--train expects <diff_file>,<msg_file>");
  }
  const std::string diff_path = train_pair.substr(0, comma);
  const std::string msg_path = train_pair.substr(comma + 1);
  manifest.input(diff_path);
  manifest.input(msg_path);
  manifest.input(query_path);

  const auto train = load_split(diff_path, msg_path, Split::Train);
  const RetrievalIndex index(train, k);
  const auto queries = load_diff_file(query_path, Split::Test);
  TokenCorpus messages;
  messages.reserve(queries.size());
  for (const auto& q : queries) messages.push_back(index.generate(q.diff_tokens));
  write_token_lines(out_path, messages);
  manifest.j["k"] = k;
  manifest.j["rerank"] = "sentence_bleu4_add_one_smoothed";
  manifest.artifact(out_path);
  manifest.write(out_path + ".manifest.json");
  return 0;
}

int cmd_sweep(const std::string& kind, std::string grid_text, const DataArgs& data,
              const ModelArgs& margs, const TrainArgs& targs,
              const std::string& out_dir, CLI::App* sub) {
  ManifestWriter manifest("sweep", sub);
  for (const auto& p :
       {data.train_diff, data.train_msg, data.test_diff, data.test_msg}) {
    manifest.input(p);
  }
  if (grid_text.empty()) {
    if (kind == "mask-rate") grid_text = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    else if (kind == "labels") grid_text = "0.25,0.5,0.75,1.0";
    else if (kind == "layers") grid_text = "1,2,4";
    else grid_text = "1,2,4,8";
  }
  std::vector<double> grid;
  for (std::size_t pos = 0; pos < grid_text.size();) {
    const auto next = grid_text.find(',', pos);
    const std::string item = grid_text.substr(
        pos, next == std::string::npos ? std::string::npos : next - pos);
    grid.push_back(std::stod(item));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (grid.empty()) throw Error(ErrorCode::InvalidConfig, "empty sweep grid");

  const TrainInputs in = load_train_inputs(data, targs.min_freq, targs.max_vocab);
  const auto test = load_split(data.test_diff, data.test_msg, Split::Test);

  fs::create_directories(out_dir);
  ordered_json rows = ordered_json::array();
  std::string csv =
      "point,parameter_count,stage1_steps,stage2_steps,bleu4,rouge1,rouge2,rougeL,"
      "meteor,error\n";
  for (double point : grid) {
    ordered_json row;
    row["point"] = point;
    try {
      ModelArgs m = margs;
      TrainArgs t = targs;
      if (kind == "mask-rate") t.mask_rate = point;
      else if (kind == "labels") t.label_fraction = point;
      else if (kind == "layers") m.layers = static_cast<int>(point);
      else m.heads = static_cast<int>(point);

      const ModelConfig model = m.config(in.vocab.size());
      const TrainOutcome outcome =
          run_training("two-stage", in, model, t.config(), "", "");

      DecodeConfig decode;  // greedy defaults
      TokenCorpus refs;
      for (const auto& rec : test) refs.push_back(rec.msg_tokens);
      const TokenCorpus cands = generate_all(outcome.params, in.vocab, test, decode);
      const MetricReport report = evaluate_corpus(cands, refs);

      row["parameter_count"] = outcome.params.parameter_count();
      row["stage1_steps"] = outcome.stage1_steps;
      row["stage2_steps"] = outcome.stage2_steps;
      row["bleu4"] = report.bleu4;
      row["rouge1"] = report.rouge1;
      row["rouge2"] = report.rouge2;
      row["rougeL"] = report.rougeL;
      row["meteor"] = report.meteor;
      row["error"] = nullptr;
      csv += std::to_string(point) + "," +
             std::to_string(outcome.params.parameter_count()) + "," +
             std::to_string(outcome.stage1_steps) + "," +
             std::to_string(outcome.stage2_steps) + "," +
             std::to_string(report.bleu4) + "," + std::to_string(report.rouge1) +
             "," + std::to_string(report.rouge2) + "," +
             std::to_string(report.rougeL) + "," + std::to_string(report.meteor) +
             ",\n";
    } catch (const std::exception& e) {
      row["error"] = e.what();  // record and keep sweeping
      csv += std::to_string(point) + ",,,,,,,,," + "\"" + e.what() + "\"\n";
    }
    rows.push_back(row);
  }
  ordered_json j;
  j["kind"] = kind;
  j["rows"] = rows;
  write_text(out_dir + "/sweep.json", j.dump(2) + "\n");
  write_text(out_dir + "/sweep.csv", csv);
  manifest.artifact(out_dir + "/sweep.json");
  manifest.artifact(out_dir + "/sweep.csv");
  manifest.write(out_dir + "/manifest.json");
  std::cout << "sweep rows: " << rows.size() << "\n";
  return 0;
}

int cmd_report(const std::string& log_path, const std::string& out_path,
               CLI::App* sub) {
  ManifestWriter manifest("report", sub);
  manifest.input(log_path);
  std::ifstream in(log_path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + log_path);
  ordered_json epochs = ordered_json::array();
  long long steps = 0;
  double last_loss = 0.0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("type") == "step") {
      ++steps;
      last_loss = j.at("loss_mean").get<double>();
    } else {
      epochs.push_back(ordered_json{{"stage", j.at("stage")},
                                    {"epoch", j.at("epoch")},
                                    {"objective", j.at("objective")},
                                    {"val_bleu4", j.at("val_bleu4")}});
    }
  }
  ordered_json j;
  j["steps"] = steps;
  j["final_loss_mean"] = last_loss;
  j["epochs"] = epochs;
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text(out_path, text);
    manifest.artifact(out_path);
    manifest.write(out_path + ".manifest.json");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contextualized commit-message generation toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "load and validate corpus files");
  DataArgs ingest_data;
  ingest_data.add_train(ingest);
  ingest_data.add_valid(ingest);
  ingest_data.add_test(ingest);
  std::string ingest_out;
  ingest->add_option("--out", ingest_out, "report path (stdout when omitted)");

  // vocab
  auto* vocab = app.add_subcommand("vocab", "build the shared vocabulary");
  DataArgs vocab_data;
  vocab_data.add_train(vocab);
  std::string vocab_out = "vocab.txt";
  int vocab_min_freq = 1, vocab_max_size = 0;
  vocab->add_option("--out", vocab_out)->capture_default_str();
  vocab->add_option("--min-freq", vocab_min_freq)->capture_default_str();
  vocab->add_option("--max-size", vocab_max_size)->capture_default_str();

  // dedup
  auto* dedup = app.add_subcommand("dedup", "train/valid/test overlap analysis");
  DataArgs dedup_data;
  dedup_data.add_train(dedup);
  dedup_data.add_valid(dedup, true);
  dedup_data.add_test(dedup, true);
  std::string dedup_out, dedup_filtered_dir;
  std::string dedup_mode = "none";
  dedup->add_option("--out", dedup_out, "report path (stdout when omitted)");
  dedup->add_option("--filter-mode", dedup_mode)
      ->check(CLI::IsMember(
          {"none", "drop-identical-code", "drop-completely-identical"}))
      ->capture_default_str();
  dedup->add_option("--filtered-dir", dedup_filtered_dir,
                    "write filtered valid/test splits here");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  DataArgs train_data;
  train_data.add_train(train);
  train_data.add_valid(train);
  ModelArgs train_model;
  train_model.add(train);
  TrainArgs train_args;
  train_args.add(train);
  std::string train_stage = "two-stage";
  std::string train_out_dir = "run";
  std::string train_init, train_dump_samples;
  train->add_option("--stage", train_stage)
      ->check(CLI::IsMember(
          {"stage1", "stage2", "two-stage", "scratch-stage2", "hybrid"}))
      ->capture_default_str();
  train->add_option("--out-dir", train_out_dir)->capture_default_str();
  train->add_option("--init", train_init, "initial checkpoint for stage2");
  train->add_option("--dump-samples", train_dump_samples,
                    "write epoch-0 stage-one samples as JSON lines");

  // generate
  auto* gen = app.add_subcommand("generate", "decode messages for diffs");
  std::string gen_ckpt, gen_vocab, gen_input, gen_out;
  std::string gen_strategy = "greedy";
  int gen_beam = 4, gen_max_len = 30;
  double gen_alpha = 0.0;
  gen->add_option("--ckpt", gen_ckpt)->required();
  gen->add_option("--vocab", gen_vocab)->required();
  gen->add_option("--input", gen_input, "diff file, one commit per line")->required();
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--strategy", gen_strategy)
      ->check(CLI::IsMember({"greedy", "beam"}))
      ->capture_default_str();
  gen->add_option("--beam-size", gen_beam)->capture_default_str();
  gen->add_option("--gen-max-len", gen_max_len)->capture_default_str();
  gen->add_option("--length-penalty", gen_alpha)->capture_default_str();

  // eval
  auto* eval = app.add_subcommand("eval", "score candidates against references");
  std::string eval_cand, eval_ref, eval_out;
  eval->add_option("--candidates", eval_cand)->required();
  eval->add_option("--references", eval_ref)->required();
  eval->add_option("--out", eval_out, "report path (stdout when omitted)");

  // nngen
  auto* nngen = app.add_subcommand("nngen", "retrieval baseline");
  std::string nngen_train, nngen_query, nngen_out;
  int nngen_k = 5;
  nngen->add_option("--train", nngen_train, "<diff_file>,<msg_file>")->required();
  nngen->add_option("--query", nngen_query, "query diff file")->required();
  nngen->add_option("--out", nngen_out)->required();
  nngen->add_option("--k", nngen_k)->capture_default_str();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid of full two-stage runs");
  DataArgs sweep_data;
  sweep_data.add_train(sweep);
  sweep_data.add_test(sweep, true);
  ModelArgs sweep_model;
  sweep_model.add(sweep);
  TrainArgs sweep_args;
  sweep_args.add(sweep);
  std::string sweep_kind, sweep_grid, sweep_out_dir = "sweep";
  sweep->add_option("--kind", sweep_kind)
      ->check(CLI::IsMember({"mask-rate", "labels", "layers", "heads"}))
      ->required();
  sweep->add_option("--grid", sweep_grid, "comma-separated grid values");
  sweep->add_option("--out-dir", sweep_out_dir)->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "summarize a training log");
  std::string report_log, report_out;
  report->add_option("--log", report_log)->required();
  report->add_option("--out", report_out, "summary path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (ingest->parsed()) return cmd_ingest(ingest_data, ingest_out, ingest);
    if (vocab->parsed()) {
      return cmd_vocab(vocab_data, vocab_out, vocab_min_freq, vocab_max_size, vocab);
    }
    if (dedup->parsed()) {
      return cmd_dedup(dedup_data, dedup_out, dedup_mode, dedup_filtered_dir, dedup);
    }
    if (train->parsed()) {
      return cmd_train(train_stage, train_data, train_model, train_args,
                       train_out_dir, train_init, train_dump_samples, train);
    }
    if (gen->parsed()) {
      return cmd_generate(gen_ckpt, gen_vocab, gen_input, gen_out, gen_strategy,
                          gen_beam, gen_max_len, gen_alpha, gen);
    }
    if (eval->parsed()) return cmd_eval(eval_cand, eval_ref, eval_out, eval);
    if (nngen->parsed()) {
      return cmd_nngen(nngen_train, nngen_query, nngen_out, nngen_k, nngen);
    }
    if (sweep->parsed()) {
      return cmd_sweep(sweep_kind, sweep_grid, sweep_data, sweep_model, sweep_args,
                       sweep_out_dir, sweep);
    }
    if (report->parsed()) return cmd_report(report_log, report_out, report);
  } catch (const Error& e) {
    std::cerr << "error [" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return e.code() == ErrorCode::NumericFailure ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

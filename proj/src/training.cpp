#include "coregen/training.hpp"

#include "coregen/decode.hpp"
#include "coregen/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace coregen {

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (warmup_steps < 1) {
    throw Error(ErrorCode::InvalidConfig, "warmup_steps must be >= 1");
  }
  if (label_fraction <= 0.0 || label_fraction > 1.0) {
    throw Error(ErrorCode::InvalidConfig, "label_fraction must be in (0,1]");
  }
  if (mask_rate <= 0.0 || mask_rate >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "mask_rate must be in (0,1)");
  }
  if (epochs_stage1 < 0 || epochs_stage2 < 0) {
    throw Error(ErrorCode::InvalidConfig, "epoch counts must be >= 0");
  }
}

double lr_at_step(long long t, int d_model, int warmup_steps) {
  const double step = static_cast<double>(t);
  const double warmup = static_cast<double>(warmup_steps);
  return 1.0 / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(step), step * std::pow(warmup, -1.5));
}

OptimizerState OptimizerState::like(const ParameterStore& params) {
  OptimizerState state;
  state.first_moment.reserve(params.array_count());
  state.second_moment.reserve(params.array_count());
  for (std::size_t i = 0; i < params.array_count(); ++i) {
    state.first_moment.emplace_back(
        Matrix::Zero(params.array(i).rows(), params.array(i).cols()));
    state.second_moment.emplace_back(
        Matrix::Zero(params.array(i).rows(), params.array(i).cols()));
  }
  return state;
}

void adam_step(ParameterStore& params, const GradientStore& grads,
               OptimizerState& state, double lr, double beta1, double beta2,
               double eps) {
  if (grads.array_count() != params.array_count() ||
      state.first_moment.size() != params.array_count()) {
    throw Error(ErrorCode::ShapeMismatch, "optimizer arrays misaligned");
  }
  ++state.t;
  const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.array_count(); ++i) {
    const Matrix& g = grads.array(i);
    Matrix& p = params.array(i);
    if (g.rows() != p.rows() || g.cols() != p.cols()) {
      throw Error(ErrorCode::ShapeMismatch,
                  "gradient shape mismatch for " + params.name(i));
    }
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = beta1 * m + (1.0 - beta1) * g;
    v = (beta2 * v.array() + (1.0 - beta2) * g.array().square()).matrix();
    p.array() -= lr * (m.array() / bias1) /
                 ((v.array() / bias2).sqrt() + eps);
  }
}

std::string TrainingLog::to_jsonl() const {
  std::string out;
  for (const StepRecord& s : steps_) {
    nlohmann::ordered_json j;
    j["type"] = "step";
    j["stage"] = s.stage;
    j["step"] = s.step;
    j["epoch"] = s.epoch;
    j["task"] = s.task;
    j["lr"] = s.lr;
    j["loss_mean"] = s.loss_mean;
    j["loss_sum"] = s.loss_sum;
    j["tokens"] = s.tokens;
    j["samples"] = s.samples;
    if (s.stage1_loss) j["stage1_loss"] = *s.stage1_loss;
    if (s.stage2_loss) j["stage2_loss"] = *s.stage2_loss;
    if (s.total_loss) j["total_loss"] = *s.total_loss;
    out += j.dump();
    out += '\n';
  }
  for (const EpochRecord& e : epochs_) {
    nlohmann::ordered_json j;
    j["type"] = "epoch";
    j["stage"] = e.stage;
    j["epoch"] = e.epoch;
    j["sum_changes"] = e.sum_changes;
    j["sum_masked"] = e.sum_masked;
    j["sum_icsm"] = e.sum_icsm;
    j["n_changes"] = e.n_changes;
    j["n_masked"] = e.n_masked;
    j["n_icsm"] = e.n_icsm;
    j["mean_changes"] = e.mean_changes ? nlohmann::json(*e.mean_changes)
                                       : nlohmann::json(nullptr);
    j["mean_masked"] =
        e.mean_masked ? nlohmann::json(*e.mean_masked) : nlohmann::json(nullptr);
    j["objective"] = e.objective;
    j["val_bleu4"] =
        e.val_bleu4 ? nlohmann::json(*e.val_bleu4) : nlohmann::json(nullptr);
    out += j.dump();
    out += '\n';
  }
  return out;
}

void TrainingLog::write_jsonl(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << to_jsonl();
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path);
}

std::pair<std::vector<TokenId>, std::vector<TokenId>> encode_pair(
    const Vocabulary& vocab, const Tokens& source, const Tokens& target,
    int max_len) {
  std::vector<TokenId> src = vocab.encode(source);
  std::vector<TokenId> tgt = vocab.encode(target);
  if (static_cast<int>(src.size()) > max_len) {
    src.resize(static_cast<std::size_t>(max_len));
  }
  if (static_cast<int>(tgt.size()) > max_len - 2) {  // room for BOS/EOS
    tgt.resize(static_cast<std::size_t>(max_len - 2));
  }
  return {std::move(src), std::move(tgt)};
}

std::vector<std::size_t> label_subset(std::size_t n, double fraction,
                                      std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix64(seed, 0x1ABE15ULL));
  rng.shuffle(order);
  const auto count = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(n)));
  if (count == 0) {
    throw Error(ErrorCode::NoLabels, "label fraction selects zero records");
  }
  order.resize(std::min(count, n));
  return order;
}

namespace {

constexpr std::uint64_t kTagStage1Data = 0x51D1;
constexpr std::uint64_t kTagStage1Order = 0x51D2;
constexpr std::uint64_t kTagStage2Order = 0x52D1;
constexpr std::uint64_t kTagDropout = 0xD407;

struct EncodedPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
  StageOneTask task = StageOneTask::ChangesPrediction;
};

Batch assemble(const std::vector<EncodedPair>& pairs,
               const std::vector<std::size_t>& rows) {
  std::vector<std::vector<TokenId>> sources, targets;
  sources.reserve(rows.size());
  targets.reserve(rows.size());
  for (std::size_t r : rows) {
    sources.push_back(pairs[r].source);
    targets.push_back(pairs[r].target);
  }
  return Batch::from_sequences(sources, targets);
}

void check_finite(double loss) {
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::NumericFailure, "non-finite training loss");
  }
}

double validation_bleu(const TrainContext& ctx, const ParameterStore& params) {
  const auto& records = *ctx.valid;
  const std::size_t count =
      std::min<std::size_t>(records.size(), static_cast<std::size_t>(ctx.config.val_cap));
  if (count == 0) return 0.0;
  DecodeConfig decode;
  decode.strategy = DecodeStrategy::Greedy;
  TokenCorpus candidates, references;
  for (std::size_t i = 0; i < count; ++i) {
    auto [src, tgt] = encode_pair(*ctx.vocab, records[i].diff_tokens,
                                  records[i].msg_tokens, ctx.model.max_len);
    (void)tgt;
    const auto out = generate(params, ctx.model, src, decode);
    candidates.push_back(ctx.vocab->decode(out));
    references.push_back(records[i].msg_tokens);
  }
  return corpus_bleu4(candidates, references);
}

// Homogeneous-task batches over the epoch's samples, interleaved in
// proportion to the task pools by a seeded shuffle of the batch order.
struct StageOneEpoch {
  std::vector<EncodedPair> pairs;
  std::vector<std::vector<std::size_t>> batches;  // row indices into pairs
  long long n_changes = 0, n_masked = 0, n_icsm = 0;
};

StageOneEpoch build_stage_one_epoch(const TrainContext& ctx, std::uint64_t epoch) {
  StageOneOptions options;
  options.policy.mask_rate = ctx.config.mask_rate;
  options.icsm_enabled = ctx.config.icsm_enabled;
  options.icsm_max_per_commit = ctx.config.icsm_max_per_commit;
  const auto samples = build_stage_one_dataset(
      *ctx.train, options, mix64(ctx.config.seed, kTagStage1Data), epoch);

  StageOneEpoch out;
  out.pairs.reserve(samples.size());
  std::vector<std::size_t> by_task[3];
  for (const StageOneSample& s : samples) {
    auto [src, tgt] =
        encode_pair(*ctx.vocab, s.source, s.target, ctx.model.max_len);
    by_task[static_cast<int>(s.task)].push_back(out.pairs.size());
    out.pairs.push_back({std::move(src), std::move(tgt), s.task});
    switch (s.task) {
      case StageOneTask::ChangesPrediction: ++out.n_changes; break;
      case StageOneTask::MaskedFragment: ++out.n_masked; break;
      case StageOneTask::InStatementMask: ++out.n_icsm; break;
    }
  }
  for (int task = 0; task < 3; ++task) {
    auto& rows = by_task[task];
    if (rows.empty()) continue;
    Rng rng(mix64(ctx.config.seed, kTagStage1Order + 16 * static_cast<std::uint64_t>(task),
                  epoch));
    rng.shuffle(rows);
    for (std::size_t start = 0; start < rows.size();
         start += static_cast<std::size_t>(ctx.config.batch_size)) {
      const std::size_t end =
          std::min(rows.size(), start + static_cast<std::size_t>(ctx.config.batch_size));
      out.batches.emplace_back(rows.begin() + static_cast<std::ptrdiff_t>(start),
                               rows.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  Rng rng(mix64(ctx.config.seed, kTagStage1Order + 64, epoch));
  rng.shuffle(out.batches);
  return out;
}

std::vector<EncodedPair> stage_two_pairs(const TrainContext& ctx) {
  const auto& corpus = *ctx.train;
  if (corpus.empty()) throw Error(ErrorCode::EmptyCorpus, "no training commits");
  const auto subset =
      label_subset(corpus.size(), ctx.config.label_fraction, ctx.config.seed);
  std::vector<EncodedPair> pairs;
  pairs.reserve(subset.size());
  for (std::size_t idx : subset) {
    auto [src, tgt] = encode_pair(*ctx.vocab, corpus[idx].record.diff_tokens,
                                  corpus[idx].record.msg_tokens, ctx.model.max_len);
    pairs.push_back({std::move(src), std::move(tgt), StageOneTask::ChangesPrediction});
  }
  return pairs;
}

std::vector<std::vector<std::size_t>> stage_two_epoch_batches(
    const TrainContext& ctx, std::size_t n_pairs, std::uint64_t epoch) {
  std::vector<std::size_t> order(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) order[i] = i;
  Rng rng(mix64(ctx.config.seed, kTagStage2Order, epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(ctx.config.batch_size)) {
    const std::size_t end =
        std::min(order.size(), start + static_cast<std::size_t>(ctx.config.batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace

ParameterStore train_stage_one(const TrainContext& ctx, TrainingLog& log) {
  ctx.config.validate();
  ctx.model.validate();
  if (ctx.train->empty()) throw Error(ErrorCode::EmptyCorpus, "no training commits");

  ParameterStore params = init_parameters(ctx.model, ctx.config.seed);
  OptimizerState opt = OptimizerState::like(params);
  const long long corpus_size = static_cast<long long>(ctx.train->size());

  for (int epoch = 0; epoch < ctx.config.epochs_stage1; ++epoch) {
    if (ctx.config.max_steps_stage1 > 0 && opt.t >= ctx.config.max_steps_stage1) break;
    StageOneEpoch data = build_stage_one_epoch(ctx, static_cast<std::uint64_t>(epoch));
    EpochRecord er;
    er.epoch = epoch;
    er.stage = "stage1";
    er.n_changes = data.n_changes;
    er.n_masked = data.n_masked;
    er.n_icsm = data.n_icsm;
    for (const auto& rows : data.batches) {
      if (ctx.config.max_steps_stage1 > 0 && opt.t >= ctx.config.max_steps_stage1) break;
      const Batch batch = assemble(data.pairs, rows);
      BatchStats stats;
      GradientStore grads = gradients(
          params, ctx.model, batch, ctx.model.label_smoothing, &stats, true,
          mix64(ctx.config.seed, kTagDropout, static_cast<std::uint64_t>(opt.t)));
      check_finite(stats.loss_mean);
      const double lr = lr_at_step(opt.t + 1, ctx.model.d_model, ctx.config.warmup_steps);
      adam_step(params, grads, opt, lr, ctx.config.adam_beta1, ctx.config.adam_beta2,
                ctx.config.adam_eps);
      params.step = opt.t;

      const StageOneTask task = data.pairs[rows.front()].task;
      switch (task) {
        case StageOneTask::ChangesPrediction: er.sum_changes += stats.loss_sum; break;
        case StageOneTask::MaskedFragment: er.sum_masked += stats.loss_sum; break;
        case StageOneTask::InStatementMask: er.sum_icsm += stats.loss_sum; break;
      }
      StepRecord sr;
      sr.step = opt.t;
      sr.epoch = epoch;
      sr.stage = "stage1";
      sr.task = stage_one_task_name(task);
      sr.lr = lr;
      sr.loss_mean = stats.loss_mean;
      sr.loss_sum = stats.loss_sum;
      sr.tokens = stats.tokens;
      sr.samples = static_cast<int>(rows.size());
      log.add_step(std::move(sr));
    }
    if (er.n_changes > 0) {
      er.mean_changes = er.sum_changes / static_cast<double>(er.n_changes);
    }
    if (er.n_masked > 0) {
      er.mean_masked = er.sum_masked / static_cast<double>(er.n_masked);
    }
    er.objective =
        (er.sum_changes + er.sum_masked + er.sum_icsm) / static_cast<double>(corpus_size);
    if (ctx.valid && ctx.config.val_every > 0 &&
        (epoch + 1) % ctx.config.val_every == 0) {
      er.val_bleu4 = validation_bleu(ctx, params);
    }
    log.add_epoch(std::move(er));
  }
  params.stage = StageTag::StageI;
  return params;
}

ParameterStore transfer_parameters(const ParameterStore& stage1) {
  if (stage1.stage != StageTag::StageI) {
    throw Error(ErrorCode::WrongStageTag,
                "parameter transfer requires a stage-one store");
  }
  ParameterStore out = stage1;
  out.stage = StageTag::StageII;
  out.step = 0;
  return out;
}

ParameterStore train_stage_two(const TrainContext& ctx, ParameterStore init,
                               TrainingLog& log) {
  ctx.config.validate();
  ctx.model.validate();
  if (init.stage == StageTag::StageI) {
    throw Error(ErrorCode::WrongStageTag,
                "stage-one store must go through transfer_parameters first");
  }
  ParameterStore params = std::move(init);
  OptimizerState opt = OptimizerState::like(params);  // fresh moments and warmup

  const auto pairs = stage_two_pairs(ctx);
  const long long n_labeled = static_cast<long long>(pairs.size());

  for (int epoch = 0; epoch < ctx.config.epochs_stage2; ++epoch) {
    if (ctx.config.max_steps_stage2 > 0 && opt.t >= ctx.config.max_steps_stage2) break;
    const auto batches =
        stage_two_epoch_batches(ctx, pairs.size(), static_cast<std::uint64_t>(epoch));
    EpochRecord er;
    er.epoch = epoch;
    er.stage = "stage2";
    double epoch_sum = 0.0;
    for (const auto& rows : batches) {
      if (ctx.config.max_steps_stage2 > 0 && opt.t >= ctx.config.max_steps_stage2) break;
      const Batch batch = assemble(pairs, rows);
      BatchStats stats;
      GradientStore grads = gradients(
          params, ctx.model, batch, ctx.model.label_smoothing, &stats, true,
          mix64(ctx.config.seed, kTagDropout + 1, static_cast<std::uint64_t>(opt.t)));
      check_finite(stats.loss_mean);
      const double lr = lr_at_step(opt.t + 1, ctx.model.d_model, ctx.config.warmup_steps);
      adam_step(params, grads, opt, lr, ctx.config.adam_beta1, ctx.config.adam_beta2,
                ctx.config.adam_eps);
      params.step = opt.t;
      epoch_sum += stats.loss_sum;

      StepRecord sr;
      sr.step = opt.t;
      sr.epoch = epoch;
      sr.stage = "stage2";
      sr.task = "message";
      sr.lr = lr;
      sr.loss_mean = stats.loss_mean;
      sr.loss_sum = stats.loss_sum;
      sr.tokens = stats.tokens;
      sr.samples = static_cast<int>(rows.size());
      log.add_step(std::move(sr));
    }
    er.objective = epoch_sum / static_cast<double>(n_labeled);
    if (ctx.valid && ctx.config.val_every > 0 &&
        (epoch + 1) % ctx.config.val_every == 0) {
      er.val_bleu4 = validation_bleu(ctx, params);
    }
    log.add_epoch(std::move(er));
  }
  params.stage = StageTag::StageII;
  return params;
}

ParameterStore train_hybrid(const TrainContext& ctx, TrainingLog& log) {
  ctx.config.validate();
  ctx.model.validate();
  if (!ctx.config.hybrid) {
    throw Error(ErrorCode::InvalidConfig, "hybrid training requires the hybrid flag");
  }
  ParameterStore params = init_parameters(ctx.model, ctx.config.seed);
  OptimizerState opt = OptimizerState::like(params);

  const auto pairs = stage_two_pairs(ctx);
  const double w1 = ctx.config.hybrid_stage1_weight;

  for (int epoch = 0; epoch < ctx.config.epochs_stage2; ++epoch) {
    if (ctx.config.max_steps_stage2 > 0 && opt.t >= ctx.config.max_steps_stage2) break;
    // One pass over the message stream per epoch; the representation stream
    // cycles alongside it.
    StageOneEpoch s1 = build_stage_one_epoch(ctx, static_cast<std::uint64_t>(epoch));
    const auto s2_batches =
        stage_two_epoch_batches(ctx, pairs.size(), static_cast<std::uint64_t>(epoch));
    EpochRecord er;
    er.epoch = epoch;
    er.stage = "hybrid";
    er.n_changes = s1.n_changes;
    er.n_masked = s1.n_masked;
    er.n_icsm = s1.n_icsm;
    double epoch_sum = 0.0;
    std::size_t s1_cursor = 0;
    for (const auto& s2_rows : s2_batches) {
      if (ctx.config.max_steps_stage2 > 0 && opt.t >= ctx.config.max_steps_stage2) break;
      const std::uint64_t drop_seed =
          mix64(ctx.config.seed, kTagDropout + 1, static_cast<std::uint64_t>(opt.t));

      const Batch s2_batch = assemble(pairs, s2_rows);
      BatchStats s2_stats;
      GradientStore grads = gradients(params, ctx.model, s2_batch,
                                      ctx.model.label_smoothing, &s2_stats, true,
                                      drop_seed);
      check_finite(s2_stats.loss_mean);

      BatchStats s1_stats;
      if (!s1.batches.empty()) {
        const auto& s1_rows = s1.batches[s1_cursor];
        s1_cursor = (s1_cursor + 1) % s1.batches.size();
        const Batch s1_batch = assemble(s1.pairs, s1_rows);
        GradientStore s1_grads = gradients(
            params, ctx.model, s1_batch, ctx.model.label_smoothing, &s1_stats, true,
            mix64(ctx.config.seed, kTagDropout, static_cast<std::uint64_t>(opt.t)));
        check_finite(s1_stats.loss_mean);
        for (std::size_t i = 0; i < grads.array_count(); ++i) {
          grads.array(i) += w1 * s1_grads.array(i);
        }
        switch (s1.pairs[s1_rows.front()].task) {
          case StageOneTask::ChangesPrediction: er.sum_changes += s1_stats.loss_sum; break;
          case StageOneTask::MaskedFragment: er.sum_masked += s1_stats.loss_sum; break;
          case StageOneTask::InStatementMask: er.sum_icsm += s1_stats.loss_sum; break;
        }
      }
      const double lr = lr_at_step(opt.t + 1, ctx.model.d_model, ctx.config.warmup_steps);
      adam_step(params, grads, opt, lr, ctx.config.adam_beta1, ctx.config.adam_beta2,
                ctx.config.adam_eps);
      params.step = opt.t;
      epoch_sum += s2_stats.loss_sum;

      StepRecord sr;
      sr.step = opt.t;
      sr.epoch = epoch;
      sr.stage = "hybrid";
      sr.task = "hybrid";
      sr.lr = lr;
      sr.loss_mean = s2_stats.loss_mean;
      sr.loss_sum = s2_stats.loss_sum;
      sr.tokens = s2_stats.tokens;
      sr.samples = static_cast<int>(s2_rows.size());
      sr.stage1_loss = w1 * s1_stats.loss_mean;
      sr.stage2_loss = s2_stats.loss_mean;
      sr.total_loss = *sr.stage1_loss + *sr.stage2_loss;
      log.add_step(std::move(sr));
    }
    er.objective = epoch_sum / static_cast<double>(pairs.size());
    if (ctx.valid && ctx.config.val_every > 0 &&
        (epoch + 1) % ctx.config.val_every == 0) {
      er.val_bleu4 = validation_bleu(ctx, params);
    }
    log.add_epoch(std::move(er));
  }
  params.stage = StageTag::StageII;
  return params;
}

}  // namespace coregen

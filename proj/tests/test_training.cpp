#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "coregen/training.hpp"
#include "testutil/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace coregen;

namespace {

std::vector<TokenizedCommit> structure_all(const std::vector<CommitRecord>& records) {
  std::vector<TokenizedCommit> out;
  out.reserve(records.size());
  for (const auto& rec : records) out.push_back(structure_commit(rec));
  return out;
}

struct Fixture {
  std::vector<CommitRecord> records;
  std::vector<TokenizedCommit> commits;
  Vocabulary vocab;
  ModelConfig model;
  TrainConfig config;

  explicit Fixture(int n = 24, std::uint64_t seed = 5) {
    const auto corpus = synthetic::make_learnable_corpus(n, seed);
    records = corpus.train;
    commits = structure_all(records);
    vocab = build_vocabulary(records, 1, 0);
    model.d_model = 16;
    model.n_layers = 1;
    model.n_heads = 2;
    model.vocab_size = vocab.size();
    model.max_len = 64;
    model.dropout_rate = 0.0;
    model.label_smoothing = 0.0;
    config.batch_size = 8;
    config.warmup_steps = 20;
    config.epochs_stage1 = 2;
    config.epochs_stage2 = 2;
    config.seed = 99;
  }

  TrainContext context() const {
    TrainContext ctx;
    ctx.vocab = &vocab;
    ctx.train = &commits;
    ctx.model = model;
    ctx.config = config;
    return ctx;
  }
};

}  // namespace

TEST_CASE("lr schedule matches the closed-form values") {
  CHECK(std::abs(lr_at_step(1, 512, 4000) - 1.7469281074217107e-7) /
            1.7469281074217107e-7 <
        1e-9);
  CHECK(std::abs(lr_at_step(4000, 512, 4000) - 6.9877124296868428e-4) /
            6.9877124296868428e-4 <
        1e-9);
  CHECK(lr_at_step(3999, 512, 4000) < lr_at_step(4000, 512, 4000));
  CHECK(lr_at_step(4001, 512, 4000) < lr_at_step(4000, 512, 4000));
  // strictly increasing through warmup, decreasing after
  for (long long t = 1; t < 50; ++t) {
    CHECK(lr_at_step(t, 64, 50) < lr_at_step(t + 1, 64, 50));
  }
  for (long long t = 50; t < 99; ++t) {
    CHECK(lr_at_step(t, 64, 50) > lr_at_step(t + 1, 64, 50));
  }
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  ModelConfig mc;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.vocab_size = 10;
  ParameterStore params = init_parameters(mc, 4);
  const ParameterStore before = params;
  GradientStore grads = init_parameters(mc, 4);
  grads.set_zero();
  OptimizerState state = OptimizerState::like(params);
  adam_step(params, grads, state, 0.1);
  for (std::size_t i = 0; i < params.array_count(); ++i) {
    CHECK(params.array(i) == before.array(i));
  }
  CHECK(state.t == 1);
}

TEST_CASE("adam first step matches the closed form on a scalar") {
  ParameterStore params;
  params.add("w", 1, 1)(0, 0) = 0.0;
  GradientStore grads;
  grads.add("w", 1, 1)(0, 0) = 1.0;
  OptimizerState state = OptimizerState::like(params);
  adam_step(params, grads, state, 0.1, 0.9, 0.98, 1e-9);
  // bias correction makes the first update -lr * g/(|g| + eps)
  CHECK(params.at("w")(0, 0) == doctest::Approx(-0.0999999999).epsilon(1e-12));
}

TEST_CASE("adam trajectories are bit-reproducible") {
  auto run = [] {
    ModelConfig mc;
    mc.d_model = 8;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.vocab_size = 12;
    ParameterStore params = init_parameters(mc, 21);
    OptimizerState state = OptimizerState::like(params);
    const Batch batch = Batch::from_sequences({{5, 6, 7}}, {{8, 9}});
    for (int step = 0; step < 5; ++step) {
      GradientStore grads = gradients(params, mc, batch, 0.0);
      adam_step(params, grads, state, lr_at_step(state.t + 1, mc.d_model, 10));
    }
    return params;
  };
  const ParameterStore a = run();
  const ParameterStore b = run();
  for (std::size_t i = 0; i < a.array_count(); ++i) {
    CHECK(a.array(i) == b.array(i));
  }
}

TEST_CASE("label subsets are exact, reproducible and nested") {
  const auto half = label_subset(1000, 0.5, 7);
  CHECK(half.size() == 500);
  CHECK(label_subset(1000, 0.5, 7) == half);

  const auto quarter = label_subset(1000, 0.25, 7);
  CHECK(quarter.size() == 250);
  for (std::size_t i = 0; i < quarter.size(); ++i) CHECK(quarter[i] == half[i]);

  const auto full = label_subset(10, 1.0, 3);
  CHECK(full.size() == 10);
  std::set<std::size_t> unique(full.begin(), full.end());
  CHECK(unique.size() == 10);

  CHECK_THROWS_AS(label_subset(10, 0.01, 3), Error);
}

TEST_CASE("stage one trains, logs, and tolerates a missing category") {
  Fixture fx;
  // keep only explicit-change commits
  std::vector<TokenizedCommit> only_c1;
  for (const auto& c : fx.commits) {
    if (c.category == ChangeCategory::ExplicitChange) only_c1.push_back(c);
  }
  REQUIRE(!only_c1.empty());
  TrainContext ctx = fx.context();
  ctx.train = &only_c1;
  TrainingLog log;
  const ParameterStore params = train_stage_one(ctx, log);
  CHECK(params.stage == StageTag::StageI);
  REQUIRE(!log.epochs().empty());
  CHECK(log.epochs()[0].mean_changes.has_value());
  CHECK_FALSE(log.epochs()[0].mean_masked.has_value());  // no implicit commits
  for (const auto& step : log.steps()) CHECK(step.task == "changes_prediction");
}

TEST_CASE("stage one is bit-reproducible and its bookkeeping adds up") {
  Fixture fx;
  TrainingLog log_a, log_b;
  const ParameterStore a = train_stage_one(fx.context(), log_a);
  const ParameterStore b = train_stage_one(fx.context(), log_b);
  for (std::size_t i = 0; i < a.array_count(); ++i) CHECK(a.array(i) == b.array(i));
  CHECK(log_a.to_jsonl() == log_b.to_jsonl());

  // epoch objective equals the per-batch sums divided by the corpus size
  for (const auto& epoch : log_a.epochs()) {
    double sum = 0.0;
    for (const auto& step : log_a.steps()) {
      if (step.epoch == epoch.epoch) sum += step.loss_sum;
    }
    CHECK(std::abs(epoch.objective - sum / static_cast<double>(fx.commits.size())) <
          1e-9);
  }
}

TEST_CASE("transfer_parameters copies bits and retags") {
  Fixture fx;
  TrainingLog log;
  const ParameterStore stage1 = train_stage_one(fx.context(), log);
  const ParameterStore stage2_init = transfer_parameters(stage1);
  CHECK(stage2_init.stage == StageTag::StageII);
  CHECK(stage2_init.step == 0);
  for (std::size_t i = 0; i < stage1.array_count(); ++i) {
    CHECK(stage2_init.array(i) == stage1.array(i));
  }

  ParameterStore scratch = init_parameters(fx.model, 1);
  CHECK_THROWS_AS(transfer_parameters(scratch), Error);

  // one stage-two step moves at least one array
  TrainContext ctx = fx.context();
  ctx.config.epochs_stage2 = 1;
  ctx.config.max_steps_stage2 = 1;
  TrainingLog log2;
  const ParameterStore after = train_stage_two(ctx, stage2_init, log2);
  bool moved = false;
  for (std::size_t i = 0; i < after.array_count(); ++i) {
    moved |= after.array(i) != stage2_init.array(i);
  }
  CHECK(moved);
}

TEST_CASE("stage two rejects an untransferred stage-one store") {
  Fixture fx;
  TrainingLog log;
  const ParameterStore stage1 = train_stage_one(fx.context(), log);
  TrainingLog log2;
  CHECK_THROWS_AS(train_stage_two(fx.context(), stage1, log2), Error);
}

TEST_CASE("label fraction selects a deterministic subset of pairs") {
  Fixture fx(40);
  TrainContext ctx = fx.context();
  ctx.config.label_fraction = 0.5;
  ctx.config.epochs_stage2 = 1;
  TrainingLog log_a, log_b;
  const ParameterStore init_a = init_parameters(fx.model, ctx.config.seed);
  const ParameterStore init_b = init_parameters(fx.model, ctx.config.seed);
  train_stage_two(ctx, init_a, log_a);
  train_stage_two(ctx, init_b, log_b);
  CHECK(log_a.to_jsonl() == log_b.to_jsonl());
  long long samples = 0;
  for (const auto& step : log_a.steps()) samples += step.samples;
  CHECK(samples == static_cast<long long>(fx.commits.size()) / 2);
}

TEST_CASE("every parameter array accumulates gradient over an epoch") {
  Fixture fx;
  TrainContext ctx = fx.context();
  ParameterStore params = init_parameters(fx.model, 3);

  GradientStore accum = init_parameters(fx.model, 3);
  accum.set_zero();
  const auto pairs_subset = label_subset(fx.commits.size(), 1.0, ctx.config.seed);
  for (std::size_t idx : pairs_subset) {
    auto [src, tgt] =
        encode_pair(fx.vocab, fx.commits[idx].record.diff_tokens,
                    fx.commits[idx].record.msg_tokens, fx.model.max_len);
    const Batch batch = Batch::from_sequences({src}, {tgt});
    const GradientStore grads = gradients(params, fx.model, batch, 0.0);
    for (std::size_t i = 0; i < accum.array_count(); ++i) {
      accum.array(i) += grads.array(i).cwiseAbs();
    }
  }
  for (std::size_t i = 0; i < accum.array_count(); ++i) {
    INFO(accum.name(i));
    CHECK(accum.array(i).sum() > 0.0);
  }
}

TEST_CASE("hybrid bookkeeping decomposes the total loss") {
  Fixture fx;
  TrainContext ctx = fx.context();
  ctx.config.hybrid = true;
  ctx.config.epochs_stage2 = 2;
  TrainingLog log;
  train_hybrid(ctx, log);
  REQUIRE(!log.steps().empty());
  for (const auto& step : log.steps()) {
    REQUIRE(step.stage1_loss.has_value());
    REQUIRE(step.stage2_loss.has_value());
    REQUIRE(step.total_loss.has_value());
    CHECK(std::abs(*step.total_loss - (*step.stage1_loss + *step.stage2_loss)) <
          1e-9);
  }
}

TEST_CASE("hybrid with a zero stage-one weight reproduces scratch training") {
  Fixture fx;
  TrainContext ctx = fx.context();
  ctx.config.hybrid = true;
  ctx.config.hybrid_stage1_weight = 0.0;
  ctx.config.epochs_stage2 = 2;
  TrainingLog hybrid_log;
  const ParameterStore hybrid_params = train_hybrid(ctx, hybrid_log);

  TrainContext scratch_ctx = fx.context();
  scratch_ctx.config.epochs_stage2 = 2;
  TrainingLog scratch_log;
  const ParameterStore scratch_params = train_stage_two(
      scratch_ctx, init_parameters(fx.model, scratch_ctx.config.seed), scratch_log);

  REQUIRE(hybrid_log.steps().size() == scratch_log.steps().size());
  for (std::size_t i = 0; i < hybrid_log.steps().size(); ++i) {
    CHECK(hybrid_log.steps()[i].loss_mean == scratch_log.steps()[i].loss_mean);
    CHECK(hybrid_log.steps()[i].lr == scratch_log.steps()[i].lr);
  }
  for (std::size_t i = 0; i < hybrid_params.array_count(); ++i) {
    CHECK(hybrid_params.array(i) == scratch_params.array(i));
  }
}

TEST_CASE("a tiny corpus is memorized within a short budget") {
  Fixture fx(10, 11);
  // eight labeled pairs, batch of eight, plain log-likelihood
  std::vector<TokenizedCommit> eight(fx.commits.begin(), fx.commits.begin() + 8);
  TrainContext ctx = fx.context();
  ctx.train = &eight;
  ctx.config.batch_size = 8;
  ctx.config.warmup_steps = 30;
  ctx.config.epochs_stage2 = 60;
  ctx.config.max_steps_stage2 = 60;
  TrainingLog log;
  train_stage_two(ctx, init_parameters(fx.model, 17), log);
  REQUIRE(!log.steps().empty());
  const double first = log.steps().front().loss_mean;
  const double last = log.steps().back().loss_mean;
  CHECK(last < first * 0.5);  // the tight overfit bound lives in the acceptance suite
}

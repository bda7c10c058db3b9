#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "coregen/checkpoint.hpp"
#include "coregen/model.hpp"
#include "testutil/oracles.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace coregen;

namespace {

ModelConfig small_config(int vocab = 20) {
  ModelConfig config;
  config.d_model = 16;
  config.n_layers = 2;
  config.n_heads = 4;
  config.vocab_size = vocab;
  config.max_len = 32;
  config.dropout_rate = 0.0;
  config.label_smoothing = 0.0;
  return config;
}

Batch toy_batch() {
  std::vector<std::vector<TokenId>> sources = {{5, 6, 7, 8, 9}, {10, 11, 12}};
  std::vector<std::vector<TokenId>> targets = {{13, 14}, {15, 16, 17}};
  return Batch::from_sequences(sources, targets);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() /
          (name + "_" + std::to_string(::getpid())))
      .string();
}

}  // namespace

TEST_CASE("forward produces batch x tgt_len x vocab logits") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 1);
  std::vector<std::vector<TokenId>> sources = {{5, 6, 7, 8, 9}, {10, 11, 12, 5, 6}};
  std::vector<std::vector<TokenId>> targets = {{13, 14}, {15, 16}};
  const Batch batch = Batch::from_sequences(sources, targets);
  REQUIRE(batch.target.cols() == 4);  // BOS + 2 tokens + EOS
  const auto logits = forward(params, config, batch);
  REQUIRE(logits.size() == 2);
  CHECK(logits[0].rows() == 4);
  CHECK(logits[0].cols() == 20);
  CHECK(logits[1].rows() == 4);
}

TEST_CASE("forward is deterministic without dropout") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 7);
  const Batch batch = toy_batch();
  const auto a = forward(params, config, batch);
  const auto b = forward(params, config, batch);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);
}

TEST_CASE("changing a target position never leaks into earlier logits") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 3);
  std::vector<std::vector<TokenId>> sources = {{5, 6, 7}};
  std::vector<std::vector<TokenId>> targets = {{10, 11, 12, 13, 14}};
  const Batch original = Batch::from_sequences(sources, targets);
  Batch mutated = original;
  mutated.target(0, 3) = 6;  // was 12

  const auto l1 = forward(params, config, original);
  const auto l2 = forward(params, config, mutated);
  for (int t = 0; t <= 3; ++t) {
    CHECK(max_abs_diff(l1[0].row(t), l2[0].row(t)) == 0.0);  // exact
  }
  CHECK(max_abs_diff(l1[0].row(4), l2[0].row(4)) > 0.0);
}

TEST_CASE("attention rows are normalized probability distributions") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 11);
  const Batch batch = toy_batch();
  ForwardCache cache;
  forward(params, config, batch, &cache);
  int rows_checked = 0;
  for (const auto& seq : cache.sequences) {
    auto check_attention = [&](const AttentionCache& attn) {
      for (const Matrix& head : attn.probs) {
        for (Eigen::Index r = 0; r < head.rows(); ++r) {
          CHECK(head.row(r).minCoeff() >= 0.0);
          CHECK(std::abs(head.row(r).sum() - 1.0) < 1e-6);
          ++rows_checked;
        }
      }
    };
    for (const auto& layer : seq.enc_layers) check_attention(layer.attn);
    for (const auto& layer : seq.dec_layers) {
      check_attention(layer.self_attn);
      check_attention(layer.cross);
    }
  }
  CHECK(rows_checked > 0);
}

TEST_CASE("extra PAD source columns leave logits unchanged") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 5);
  std::vector<std::vector<TokenId>> sources = {{5, 6, 7}};
  std::vector<std::vector<TokenId>> targets = {{10, 11}};
  const Batch tight = Batch::from_sequences(sources, targets);

  Batch padded = tight;
  IntMatrix wide_src = IntMatrix::Constant(1, tight.source.cols() + 4, kPadId);
  BoolMatrix wide_mask = BoolMatrix::Constant(1, tight.source.cols() + 4, false);
  wide_src.leftCols(tight.source.cols()) = tight.source;
  wide_mask.leftCols(tight.source.cols()) = tight.source_mask;
  padded.source = wide_src;
  padded.source_mask = wide_mask;

  const auto a = forward(params, config, tight);
  const auto b = forward(params, config, padded);
  CHECK(max_abs_diff(a[0], b[0]) < 1e-6);
}

TEST_CASE("loss on uniform logits is log V") {
  std::vector<std::vector<TokenId>> sources = {{5}};
  std::vector<std::vector<TokenId>> targets = {{}};  // rows become [BOS, EOS]
  Batch batch = Batch::from_sequences(sources, targets);
  // score only position 0 by masking out the EOS slot
  batch.target_mask(0, 1) = false;
  std::vector<Matrix> logits = {Matrix::Zero(1, 4)};
  CHECK(loss_value(logits, batch, 0.0) ==
        doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("loss vanishes as the gold logit dominates") {
  std::vector<std::vector<TokenId>> sources = {{5}};
  std::vector<std::vector<TokenId>> targets = {{}};
  Batch batch = Batch::from_sequences(sources, targets);
  batch.target_mask(0, 1) = false;
  Matrix row = Matrix::Zero(1, 4);
  row(0, kBosId) = 50.0;  // gold at position 0 is BOS
  std::vector<Matrix> logits = {row};
  CHECK(loss_value(logits, batch, 0.0) < 1e-12);
}

TEST_CASE("label-smoothed loss matches an independent computation") {
  // independent oracle: explicit q-distribution dot log-softmax
  auto smoothed_oracle = [](const Matrix& logits, const std::vector<TokenId>& golds,
                            double eps) {
    double total = 0.0;
    const int v_size = static_cast<int>(logits.cols());
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      double lse = 0.0;
      const double max = logits.row(t).maxCoeff();
      for (int v = 0; v < v_size; ++v) lse += std::exp(logits(t, v) - max);
      lse = max + std::log(lse);
      std::vector<double> q(static_cast<std::size_t>(v_size), 0.0);
      for (int v = 0; v < v_size; ++v) {
        if (v != kPadId) q[static_cast<std::size_t>(v)] = eps / (v_size - 1);
      }
      q[static_cast<std::size_t>(golds[static_cast<std::size_t>(t)])] += 1.0 - eps;
      for (int v = 0; v < v_size; ++v) {
        total -= q[static_cast<std::size_t>(v)] * (logits(t, v) - lse);
      }
    }
    return total / static_cast<double>(logits.rows());
  };

  Rng rng(99);
  std::vector<std::vector<TokenId>> sources = {{5, 6}};
  std::vector<std::vector<TokenId>> targets = {{7, 9, 11}};
  const Batch batch = Batch::from_sequences(sources, targets);
  Matrix logits(5, 20);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      logits(r, c) = rng.uniform(-3.0, 3.0);
    }
  }
  const std::vector<TokenId> golds = {kBosId, 7, 9, 11, kEosId};
  const double expected = smoothed_oracle(logits, golds, 0.1);
  CHECK(std::abs(loss_value({logits}, batch, 0.1) - expected) < 1e-10);
  const double expected_plain = smoothed_oracle(logits, golds, 0.0);
  CHECK(std::abs(loss_value({logits}, batch, 0.0) - expected_plain) < 1e-10);
}

TEST_CASE("init_parameters is seed-deterministic") {
  const ModelConfig config = small_config();
  const ParameterStore a = init_parameters(config, 42);
  const ParameterStore b = init_parameters(config, 42);
  const ParameterStore c = init_parameters(config, 43);
  REQUIRE(a.array_count() == b.array_count());
  bool all_equal = true;
  bool any_differs = false;
  for (std::size_t i = 0; i < a.array_count(); ++i) {
    all_equal &= a.array(i) == b.array(i);
    any_differs |= a.array(i) != c.array(i);
  }
  CHECK(all_equal);
  CHECK(any_differs);
  CHECK(a.stage == StageTag::Scratch);
}

TEST_CASE("parameter counts match the closed form") {
  for (const auto& [d, layers, heads, ff, vocab] :
       {std::tuple{64, 2, 4, 256, 1000}, std::tuple{8, 1, 2, 32, 20},
        std::tuple{32, 3, 4, 64, 150}}) {
    ModelConfig config;
    config.d_model = d;
    config.n_layers = layers;
    config.n_heads = heads;
    config.d_ff = ff;
    config.vocab_size = vocab;
    const ParameterStore params = init_parameters(config, 1);
    CHECK(params.parameter_count() ==
          oracle::parameter_count(d, layers, ff, vocab, false));
  }
}

TEST_CASE("tied output projection drops the separate matrix") {
  ModelConfig config = small_config();
  config.tie_output = true;
  const ParameterStore params = init_parameters(config, 1);
  CHECK_FALSE(params.has("out.w"));
  CHECK(params.parameter_count() ==
        oracle::parameter_count(config.d_model, config.n_layers, config.ff_width(),
                                config.vocab_size, true));
  const auto logits = forward(params, config, toy_batch());
  CHECK(logits[0].cols() == config.vocab_size);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const ModelConfig config = small_config();
  ParameterStore store = init_parameters(config, 77);
  store.stage = StageTag::StageI;
  store.step = 1234;
  const std::string path = temp_path("ckpt_roundtrip");
  save_checkpoint(store, path);
  const ParameterStore loaded = load_checkpoint(path);
  CHECK(loaded.stage == StageTag::StageI);
  CHECK(loaded.step == 1234);
  CHECK(loaded.seed == store.seed);
  CHECK(loaded.config == store.config);
  REQUIRE(loaded.array_count() == store.array_count());
  for (std::size_t i = 0; i < store.array_count(); ++i) {
    CHECK(loaded.name(i) == store.name(i));
    CHECK(loaded.array(i) == store.array(i));  // bit-exact
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint loading validates the expected config") {
  const ModelConfig config = small_config();
  const ParameterStore store = init_parameters(config, 5);
  const std::string path = temp_path("ckpt_expected");
  save_checkpoint(store, path);
  ModelConfig wrong = config;
  wrong.d_model = 32;
  try {
    load_checkpoint(path, &wrong);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ShapeMismatch);
  }
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints never yield a store") {
  const std::string path = temp_path("ckpt_corrupt");
  {
    std::ofstream out(path, std::ios::binary);
    out << "CGCKgarbage-that-is-not-a-checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(path), Error);
  // truncated payload
  const ModelConfig config = small_config();
  const ParameterStore store = init_parameters(config, 5);
  save_checkpoint(store, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 64);
  try {
    load_checkpoint(path);
    FAIL("expected IoFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoFailure);
  }
  std::filesystem::remove(path);
}

TEST_CASE("forward validates ids and lengths") {
  const ModelConfig config = small_config();
  const ParameterStore params = init_parameters(config, 2);
  std::vector<std::vector<TokenId>> bad_src = {{5, 99}};  // 99 >= vocab 20
  std::vector<std::vector<TokenId>> tgt = {{6}};
  try {
    forward(params, config, Batch::from_sequences(bad_src, tgt));
    FAIL("expected IdOutOfRange");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IdOutOfRange);
  }
  std::vector<TokenId> long_src(100, 5);
  try {
    forward(params, config, Batch::from_sequences({long_src}, tgt));
    FAIL("expected SequenceTooLong");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SequenceTooLong);
  }
}

TEST_CASE("dropout masks are seed-deterministic and change the output") {
  ModelConfig config = small_config();
  config.dropout_rate = 0.2;
  const ParameterStore params = init_parameters(config, 9);
  const Batch batch = toy_batch();
  const auto a = forward(params, config, batch, nullptr, true, 123);
  const auto b = forward(params, config, batch, nullptr, true, 123);
  const auto c = forward(params, config, batch, nullptr, true, 124);
  const auto eval = forward(params, config, batch, nullptr, false, 123);
  CHECK(max_abs_diff(a[0], b[0]) == 0.0);
  CHECK(max_abs_diff(a[0], c[0]) > 0.0);
  CHECK(max_abs_diff(a[0], eval[0]) > 0.0);
}

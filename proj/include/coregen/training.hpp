#pragma once

#include "coregen/model.hpp"
#include "coregen/tasks.hpp"

#include <optional>
#include <string>
#include <vector>

namespace coregen {

struct TrainConfig {
  int batch_size = 64;
  int warmup_steps = 4000;
  int epochs_stage1 = 10;
  int epochs_stage2 = 10;
  double label_fraction = 1.0;
  double mask_rate = 0.5;
  bool icsm_enabled = false;
  int icsm_max_per_commit = 8;
  bool hybrid = false;
  double hybrid_stage1_weight = 1.0;
  std::uint64_t seed = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  int max_steps_stage1 = 0;  // 0 = uncapped
  int max_steps_stage2 = 0;
  int val_every = 0;  // epochs between validation BLEU snapshots, 0 = off
  int val_cap = 200;  // validation records scored per snapshot

  void validate() const;
};

// Schedule from the original encoder-decoder recipe:
// d_model^(-1/2) * min(t^(-1/2), t * warmup^(-3/2)); rises until t = warmup,
// decays afterwards.
double lr_at_step(long long t, int d_model, int warmup_steps);

struct OptimizerState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long long t = 0;

  static OptimizerState like(const ParameterStore& params);
};

// Bias-corrected Adam. Increments state.t, then applies
// p -= lr * mhat / (sqrt(vhat) + eps) coordinate-wise.
void adam_step(ParameterStore& params, const GradientStore& grads,
               OptimizerState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.98, double eps = 1e-9);

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  std::string stage;
  std::string task;
  double lr = 0.0;
  double loss_mean = 0.0;
  double loss_sum = 0.0;
  long long tokens = 0;
  int samples = 0;
  // hybrid decomposition (mean losses); unset otherwise
  std::optional<double> stage1_loss;
  std::optional<double> stage2_loss;
  std::optional<double> total_loss;
};

struct EpochRecord {
  int epoch = 0;
  std::string stage;
  double sum_changes = 0.0;   // summed NLL over change-prediction batches
  double sum_masked = 0.0;    // ... masked-fragment batches
  double sum_icsm = 0.0;
  long long n_changes = 0;  // samples per task
  long long n_masked = 0;
  long long n_icsm = 0;
  std::optional<double> mean_changes;
  std::optional<double> mean_masked;
  double objective = 0.0;  // stage objective normalized by corpus size
  std::optional<double> val_bleu4;
};

class TrainingLog {
 public:
  void add_step(StepRecord record) { steps_.push_back(std::move(record)); }
  void add_epoch(EpochRecord record) { epochs_.push_back(std::move(record)); }

  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<EpochRecord>& epochs() const { return epochs_; }

  std::string to_jsonl() const;
  void write_jsonl(const std::string& path) const;

 private:
  std::vector<StepRecord> steps_;
  std::vector<EpochRecord> epochs_;
};

struct TrainContext {
  const Vocabulary* vocab = nullptr;
  const std::vector<TokenizedCommit>* train = nullptr;
  const std::vector<CommitRecord>* valid = nullptr;  // optional snapshots
  ModelConfig model;
  TrainConfig config;
};

// Nested subsets: the selection for a smaller fraction is a prefix of the
// selection for a larger one under the same seed.
std::vector<std::size_t> label_subset(std::size_t n, double fraction,
                                      std::uint64_t seed);

ParameterStore train_stage_one(const TrainContext& ctx, TrainingLog& log);

// Bit-exact copy with the stage tag advanced; optimizer state and warmup
// restart from zero in stage two.
ParameterStore transfer_parameters(const ParameterStore& stage1);

ParameterStore train_stage_two(const TrainContext& ctx, ParameterStore init,
                               TrainingLog& log);

ParameterStore train_hybrid(const TrainContext& ctx, TrainingLog& log);

// Encodes and clamps one (source tokens, target tokens) pair to the model
// window as the batch assemblers do.
std::pair<std::vector<TokenId>, std::vector<TokenId>> encode_pair(
    const Vocabulary& vocab, const Tokens& source, const Tokens& target,
    int max_len);

}  // namespace coregen

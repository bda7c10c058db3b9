#pragma once

#include "coregen/common.hpp"
#include "coregen/corpus.hpp"
#include "coregen/rng.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace coregen {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 0;  // 0 selects 4*d_model
  int vocab_size = 0;
  int max_len = 512;
  double dropout_rate = 0.1;
  double label_smoothing = 0.1;
  bool tie_output = false;

  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class StageTag { Scratch, StageI, StageII };

const char* stage_tag_name(StageTag tag);
StageTag stage_tag_from_name(const std::string& name);

// Named, shaped arrays holding every model weight, in a fixed insertion
// order that the checkpoint container and the optimizer both rely on.
class ParameterStore {
 public:
  ModelConfig config;
  StageTag stage = StageTag::Scratch;
  std::uint64_t seed = 0;
  std::int64_t step = 0;

  Matrix& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;

  std::size_t array_count() const { return arrays_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& array(std::size_t i) { return arrays_[i]; }
  const Matrix& array(std::size_t i) const { return arrays_[i]; }

  long long parameter_count() const;
  void set_zero();

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

using GradientStore = ParameterStore;

// Padded id batch. Masks mark real tokens; padding is always trailing.
// Target rows are BOS-prefixed and EOS-terminated before padding.
struct Batch {
  IntMatrix source;
  IntMatrix target;
  BoolMatrix source_mask;
  BoolMatrix target_mask;

  static Batch from_sequences(const std::vector<std::vector<TokenId>>& sources,
                              const std::vector<std::vector<TokenId>>& targets);
  int size() const { return static_cast<int>(source.rows()); }
  int source_len(int row) const;
  int target_len(int row) const;
};

struct AttentionCache {
  Matrix x_q, x_kv;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, rows sum to 1
  Matrix concat;
};

struct LayerNormCache {
  Matrix xhat;
  Vector inv_std;
};

struct FfnCache {
  Matrix input;
  Matrix pre_act;
};

struct EncoderLayerCache {
  AttentionCache attn;
  Matrix attn_drop;
  LayerNormCache ln1;
  FfnCache ffn;
  Matrix ffn_drop;
  LayerNormCache ln2;
};

struct DecoderLayerCache {
  AttentionCache self_attn;
  Matrix self_drop;
  LayerNormCache ln1;
  AttentionCache cross;
  Matrix cross_drop;
  LayerNormCache ln2;
  FfnCache ffn;
  Matrix ffn_drop;
  LayerNormCache ln3;
};

struct SequenceCache {
  std::vector<TokenId> src_ids;
  std::vector<TokenId> dec_input_ids;  // shifted target
  std::vector<TokenId> gold_ids;       // target as scored by logits
  Matrix src_embed_drop, tgt_embed_drop;
  std::vector<EncoderLayerCache> enc_layers;
  std::vector<DecoderLayerCache> dec_layers;
  Matrix enc_embedded;  // encoder layer-0 input
  Matrix dec_embedded;
  Matrix memory;
  Matrix dec_out;
  Matrix logits;  // tgt_len x V
};

struct ForwardCache {
  std::vector<SequenceCache> sequences;
};

struct BatchStats {
  double loss_mean = 0.0;
  double loss_sum = 0.0;  // summed over scored positions
  long long tokens = 0;   // scored (non-PAD) target positions
};

ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed);

// logits[b](t, v) scores target position t of row b; position t sees target
// positions strictly below t (the decoder consumes the shifted target).
std::vector<Matrix> forward(const ParameterStore& params, const ModelConfig& config,
                            const Batch& batch, ForwardCache* cache = nullptr,
                            bool train_mode = false, std::uint64_t dropout_seed = 0);

// Mean label-smoothed cross-entropy over non-PAD target positions. With
// smoothing eps, the gold token holds 1-eps and eps spreads uniformly over
// the non-PAD vocabulary.
double loss_value(const std::vector<Matrix>& logits, const Batch& batch,
                  double label_smoothing, BatchStats* stats = nullptr);

GradientStore gradients(const ParameterStore& params, const ModelConfig& config,
                        const Batch& batch, double label_smoothing,
                        BatchStats* stats = nullptr, bool train_mode = false,
                        std::uint64_t dropout_seed = 0);

// Decoding support: run the encoder once, then score one next position per
// call as the generated prefix grows.
Matrix encode_source(const ParameterStore& params, const ModelConfig& config,
                     const std::vector<TokenId>& src_ids);

RowVector next_token_logits(const ParameterStore& params, const ModelConfig& config,
                            const Matrix& memory,
                            const std::vector<TokenId>& dec_input_ids);

Matrix sinusoidal_encoding(int length, int d_model);

}  // namespace coregen

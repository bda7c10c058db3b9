#include "coregen/model.hpp"

#include <algorithm>
#include <cmath>

namespace coregen {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskedScore = -1e30;

std::string layer_name(const char* block, int layer, const char* rest) {
  return std::string(block) + "." + std::to_string(layer) + "." + rest;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) {
    throw Error(ErrorCode::InvalidConfig, "model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error(ErrorCode::InvalidConfig, "d_model must be divisible by n_heads");
  }
  if (vocab_size <= kNumSentinels) {
    throw Error(ErrorCode::InvalidConfig, "vocab_size must exceed the sentinels");
  }
  if (max_len < 2) throw Error(ErrorCode::InvalidConfig, "max_len must be >= 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "dropout_rate must be in [0,1)");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw Error(ErrorCode::InvalidConfig, "label_smoothing must be in [0,1)");
  }
}

const char* stage_tag_name(StageTag tag) {
  switch (tag) {
    case StageTag::Scratch: return "scratch";
    case StageTag::StageI: return "stage1";
    case StageTag::StageII: return "stage2";
  }
  return "?";
}

StageTag stage_tag_from_name(const std::string& name) {
  if (name == "scratch") return StageTag::Scratch;
  if (name == "stage1") return StageTag::StageI;
  if (name == "stage2") return StageTag::StageII;
  throw Error(ErrorCode::VersionMismatch, "unknown stage tag: " + name);
}

Matrix& ParameterStore::add(const std::string& name, Eigen::Index rows,
                            Eigen::Index cols) {
  if (index_.count(name)) {
    throw Error(ErrorCode::ShapeMismatch, "duplicate parameter " + name);
  }
  index_[name] = arrays_.size();
  names_.push_back(name);
  arrays_.emplace_back(Matrix::Zero(rows, cols));
  return arrays_.back();
}

Matrix& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error(ErrorCode::ShapeMismatch, "missing parameter " + name);
  }
  return arrays_[it->second];
}

const Matrix& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error(ErrorCode::ShapeMismatch, "missing parameter " + name);
  }
  return arrays_[it->second];
}

long long ParameterStore::parameter_count() const {
  long long count = 0;
  for (const Matrix& m : arrays_) count += static_cast<long long>(m.size());
  return count;
}

void ParameterStore::set_zero() {
  for (Matrix& m : arrays_) m.setZero();
}

namespace {

void add_attention_params(ParameterStore& store, const std::string& prefix, int d) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) store.add(prefix + "." + w, d, d);
  for (const char* b : {"bq", "bk", "bv", "bo"}) store.add(prefix + "." + b, 1, d);
}

void add_layer_norm_params(ParameterStore& store, const std::string& prefix, int d) {
  store.add(prefix + ".g", 1, d);
  store.add(prefix + ".b", 1, d);
}

void add_ffn_params(ParameterStore& store, const std::string& prefix, int d, int ff) {
  store.add(prefix + ".w1", d, ff);
  store.add(prefix + ".b1", 1, ff);
  store.add(prefix + ".w2", ff, d);
  store.add(prefix + ".b2", 1, d);
}

ParameterStore make_store_layout(const ModelConfig& config) {
  ParameterStore store;
  store.config = config;
  const int d = config.d_model;
  const int ff = config.ff_width();
  store.add("embed.tok", config.vocab_size, d);
  for (int l = 0; l < config.n_layers; ++l) {
    add_attention_params(store, layer_name("enc", l, "attn"), d);
    add_layer_norm_params(store, layer_name("enc", l, "ln1"), d);
    add_ffn_params(store, layer_name("enc", l, "ffn"), d, ff);
    add_layer_norm_params(store, layer_name("enc", l, "ln2"), d);
  }
  for (int l = 0; l < config.n_layers; ++l) {
    add_attention_params(store, layer_name("dec", l, "self"), d);
    add_layer_norm_params(store, layer_name("dec", l, "ln1"), d);
    add_attention_params(store, layer_name("dec", l, "cross"), d);
    add_layer_norm_params(store, layer_name("dec", l, "ln2"), d);
    add_ffn_params(store, layer_name("dec", l, "ffn"), d, ff);
    add_layer_norm_params(store, layer_name("dec", l, "ln3"), d);
  }
  if (!config.tie_output) store.add("out.w", d, config.vocab_size);
  store.add("out.b", 1, config.vocab_size);
  return store;
}

bool is_weight_matrix(const std::string& name, const Matrix& m) {
  if (m.rows() == 1) return false;  // biases and layer-norm vectors
  (void)name;
  return true;
}

bool is_layer_norm_gain(const std::string& name) {
  return name.find(".ln") != std::string::npos && name.size() >= 2 &&
         name.compare(name.size() - 2, 2, ".g") == 0;
}

}  // namespace

ParameterStore init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterStore store = make_store_layout(config);
  store.seed = seed;
  store.stage = StageTag::Scratch;
  store.step = 0;
  Rng rng(mix64(seed, 0x1A17u));
  for (std::size_t i = 0; i < store.array_count(); ++i) {
    Matrix& m = store.array(i);
    const std::string& name = store.name(i);
    if (is_layer_norm_gain(name)) {
      m.setOnes();
    } else if (is_weight_matrix(name, m)) {
      const double fan_in = name == "embed.tok" ? static_cast<double>(config.d_model)
                                                : static_cast<double>(m.rows());
      const double bound = std::sqrt(3.0 / fan_in);
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          m(r, c) = rng.uniform(-bound, bound);
        }
      }
    }
    // biases and layer-norm offsets stay zero
  }
  return store;
}

Batch Batch::from_sequences(const std::vector<std::vector<TokenId>>& sources,
                            const std::vector<std::vector<TokenId>>& targets) {
  if (sources.size() != targets.size()) {
    throw Error(ErrorCode::LengthMismatch, "source/target row counts differ");
  }
  const int rows = static_cast<int>(sources.size());
  Eigen::Index src_len = 1;
  Eigen::Index tgt_len = 2;
  for (int b = 0; b < rows; ++b) {
    src_len = std::max<Eigen::Index>(src_len, static_cast<Eigen::Index>(sources[b].size()));
    tgt_len = std::max<Eigen::Index>(tgt_len, static_cast<Eigen::Index>(targets[b].size()) + 2);
  }
  Batch batch;
  batch.source = IntMatrix::Constant(rows, src_len, kPadId);
  batch.target = IntMatrix::Constant(rows, tgt_len, kPadId);
  batch.source_mask = BoolMatrix::Constant(rows, src_len, false);
  batch.target_mask = BoolMatrix::Constant(rows, tgt_len, false);
  for (int b = 0; b < rows; ++b) {
    for (std::size_t i = 0; i < sources[b].size(); ++i) {
      batch.source(b, static_cast<Eigen::Index>(i)) = sources[b][i];
      batch.source_mask(b, static_cast<Eigen::Index>(i)) = true;
    }
    batch.target(b, 0) = kBosId;
    batch.target_mask(b, 0) = true;
    for (std::size_t i = 0; i < targets[b].size(); ++i) {
      batch.target(b, static_cast<Eigen::Index>(i) + 1) = targets[b][i];
      batch.target_mask(b, static_cast<Eigen::Index>(i) + 1) = true;
    }
    batch.target(b, static_cast<Eigen::Index>(targets[b].size()) + 1) = kEosId;
    batch.target_mask(b, static_cast<Eigen::Index>(targets[b].size()) + 1) = true;
  }
  return batch;
}

int Batch::source_len(int row) const {
  int len = static_cast<int>(source.cols());
  while (len > 0 && !source_mask(row, len - 1)) --len;
  return len;
}

int Batch::target_len(int row) const {
  int len = static_cast<int>(target.cols());
  while (len > 0 && !target_mask(row, len - 1)) --len;
  return len;
}

Matrix sinusoidal_encoding(int length, int d_model) {
  Matrix pe(length, d_model);
  for (int t = 0; t < length; ++t) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(t) /
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe(t, i) = std::sin(angle);
      if (i + 1 < d_model) pe(t, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

namespace {

struct DropoutStream {
  Rng rng;
  double rate;
  bool active;

  DropoutStream(std::uint64_t seed, double rate_, bool train)
      : rng(seed), rate(rate_), active(train && rate_ > 0.0) {}

  // Inverted dropout mask; empty matrix when inactive.
  Matrix mask(Eigen::Index rows, Eigen::Index cols) {
    if (!active) return Matrix();
    Matrix m(rows, cols);
    const double keep_scale = 1.0 / (1.0 - rate);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        m(r, c) = rng.uniform01() >= rate ? keep_scale : 0.0;
      }
    }
    return m;
  }
};

void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size() > 0) x.array() *= mask.array();
}

Matrix embed_ids(const Matrix& table, const std::vector<TokenId>& ids,
                 const Matrix& pe, double scale) {
  Matrix x(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    x.row(static_cast<Eigen::Index>(t)) =
        scale * table.row(ids[t]) + pe.row(static_cast<Eigen::Index>(t));
  }
  return x;
}

void softmax_rows(Matrix& scores) {
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double max = scores.row(r).maxCoeff();
    scores.row(r) = (scores.row(r).array() - max).exp().matrix();
    scores.row(r) /= scores.row(r).sum();
  }
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias,
                          LayerNormCache& cache) {
  const Eigen::Index d = x.cols();
  cache.xhat.resize(x.rows(), d);
  cache.inv_std.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std(r) = inv_std;
    cache.xhat.row(r) = ((x.row(r).array() - mean) * inv_std).matrix();
  }
  Matrix out = cache.xhat;
  out.array().rowwise() *= gain.row(0).array();
  out.rowwise() += bias.row(0);
  return out;
}

Matrix layer_norm_backward(const Matrix& d_out, const LayerNormCache& cache,
                           const Matrix& gain, Matrix& d_gain, Matrix& d_bias) {
  d_gain.row(0) += (d_out.array() * cache.xhat.array()).colwise().sum().matrix();
  d_bias.row(0) += d_out.colwise().sum();
  Matrix dxhat = d_out;
  dxhat.array().rowwise() *= gain.row(0).array();
  Matrix dx(d_out.rows(), d_out.cols());
  for (Eigen::Index r = 0; r < d_out.rows(); ++r) {
    const double mean_dxhat = dxhat.row(r).mean();
    const double mean_dxhat_xhat =
        (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = (cache.inv_std(r) *
                 (dxhat.row(r).array() - mean_dxhat -
                  cache.xhat.row(r).array() * mean_dxhat_xhat))
                    .matrix();
  }
  return dx;
}

struct AttentionParams {
  const Matrix *wq, *wk, *wv, *wo;
  const Matrix *bq, *bk, *bv, *bo;
};

AttentionParams attention_params(const ParameterStore& params,
                                 const std::string& prefix) {
  return {&params.at(prefix + ".wq"), &params.at(prefix + ".wk"),
          &params.at(prefix + ".wv"), &params.at(prefix + ".wo"),
          &params.at(prefix + ".bq"), &params.at(prefix + ".bk"),
          &params.at(prefix + ".bv"), &params.at(prefix + ".bo")};
}

Matrix attention_forward(const Matrix& x_q, const Matrix& x_kv,
                         const AttentionParams& p, int n_heads, bool causal,
                         AttentionCache& cache) {
  const Eigen::Index d = x_q.cols();
  const Eigen::Index dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  cache.x_q = x_q;
  cache.x_kv = x_kv;
  cache.q = x_q * *p.wq;
  cache.q.rowwise() += p.bq->row(0);
  cache.k = x_kv * *p.wk;
  cache.k.rowwise() += p.bk->row(0);
  cache.v = x_kv * *p.wv;
  cache.v.rowwise() += p.bv->row(0);

  cache.probs.assign(static_cast<std::size_t>(n_heads), Matrix());
  cache.concat.resize(x_q.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = cache.q.middleCols(h * dk, dk);
    const auto kh = cache.k.middleCols(h * dk, dk);
    const auto vh = cache.v.middleCols(h * dk, dk);
    Matrix scores = qh * kh.transpose() * inv_sqrt_dk;
    if (causal) {
      for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < scores.cols(); ++j) {
          scores(i, j) = kMaskedScore;
        }
      }
    }
    softmax_rows(scores);
    cache.probs[static_cast<std::size_t>(h)] = std::move(scores);
    cache.concat.middleCols(h * dk, dk) =
        cache.probs[static_cast<std::size_t>(h)] * vh;
  }
  Matrix out = cache.concat * *p.wo;
  out.rowwise() += p.bo->row(0);
  return out;
}

struct AttentionGrads {
  Matrix *wq, *wk, *wv, *wo;
  Matrix *bq, *bk, *bv, *bo;
};

AttentionGrads attention_grads(GradientStore& grads, const std::string& prefix) {
  return {&grads.at(prefix + ".wq"), &grads.at(prefix + ".wk"),
          &grads.at(prefix + ".wv"), &grads.at(prefix + ".wo"),
          &grads.at(prefix + ".bq"), &grads.at(prefix + ".bk"),
          &grads.at(prefix + ".bv"), &grads.at(prefix + ".bo")};
}

// Returns d(x_q); adds d(x_kv) into d_x_kv.
Matrix attention_backward(const Matrix& d_out, const AttentionCache& cache,
                          const AttentionParams& p, const AttentionGrads& g,
                          int n_heads, Matrix& d_x_kv) {
  const Eigen::Index d = cache.x_q.cols();
  const Eigen::Index dk = d / n_heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  *g.wo += cache.concat.transpose() * d_out;
  g.bo->row(0) += d_out.colwise().sum();
  Matrix d_concat = d_out * p.wo->transpose();

  Matrix dq(cache.q.rows(), d), dkm(cache.k.rows(), d), dv(cache.v.rows(), d);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = cache.q.middleCols(h * dk, dk);
    const auto kh = cache.k.middleCols(h * dk, dk);
    const auto vh = cache.v.middleCols(h * dk, dk);
    const Matrix& probs = cache.probs[static_cast<std::size_t>(h)];
    const auto d_ch = d_concat.middleCols(h * dk, dk);

    Matrix d_probs = d_ch * vh.transpose();
    dv.middleCols(h * dk, dk) = probs.transpose() * d_ch;

    // softmax backward; masked entries have probs == 0, so they stay zero
    Matrix d_scores(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      const double dot = probs.row(r).dot(d_probs.row(r));
      d_scores.row(r) =
          (probs.row(r).array() * (d_probs.row(r).array() - dot)).matrix();
    }
    d_scores *= inv_sqrt_dk;
    dq.middleCols(h * dk, dk) = d_scores * kh;
    dkm.middleCols(h * dk, dk) = d_scores.transpose() * qh;
  }

  *g.wq += cache.x_q.transpose() * dq;
  g.bq->row(0) += dq.colwise().sum();
  *g.wk += cache.x_kv.transpose() * dkm;
  g.bk->row(0) += dkm.colwise().sum();
  *g.wv += cache.x_kv.transpose() * dv;
  g.bv->row(0) += dv.colwise().sum();

  d_x_kv += dkm * p.wk->transpose() + dv * p.wv->transpose();
  return dq * p.wq->transpose();
}

Matrix ffn_forward(const Matrix& x, const ParameterStore& params,
                   const std::string& prefix, FfnCache& cache) {
  cache.input = x;
  cache.pre_act = x * params.at(prefix + ".w1");
  cache.pre_act.rowwise() += params.at(prefix + ".b1").row(0);
  Matrix hidden = cache.pre_act.cwiseMax(0.0);
  Matrix out = hidden * params.at(prefix + ".w2");
  out.rowwise() += params.at(prefix + ".b2").row(0);
  return out;
}

Matrix ffn_backward(const Matrix& d_out, const FfnCache& cache,
                    const ParameterStore& params, GradientStore& grads,
                    const std::string& prefix) {
  const Matrix hidden = cache.pre_act.cwiseMax(0.0);
  grads.at(prefix + ".w2") += hidden.transpose() * d_out;
  grads.at(prefix + ".b2").row(0) += d_out.colwise().sum();
  Matrix d_hidden = d_out * params.at(prefix + ".w2").transpose();
  d_hidden.array() *= (cache.pre_act.array() > 0.0).cast<double>();
  grads.at(prefix + ".w1") += cache.input.transpose() * d_hidden;
  grads.at(prefix + ".b1").row(0) += d_hidden.colwise().sum();
  return d_hidden * params.at(prefix + ".w1").transpose();
}

void check_ids(const std::vector<TokenId>& ids, int vocab_size) {
  for (TokenId id : ids) {
    if (id < 0 || id >= vocab_size) {
      throw Error(ErrorCode::IdOutOfRange,
                  "token id " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(vocab_size));
    }
  }
}

// Forward over one trimmed sequence pair, filling the cache.
void forward_sequence(const ParameterStore& params, const ModelConfig& config,
                      SequenceCache& seq, const Matrix& pe, DropoutStream& drop) {
  const double scale = std::sqrt(static_cast<double>(config.d_model));
  const Matrix& embed_table = params.at("embed.tok");

  Matrix x = embed_ids(embed_table, seq.src_ids, pe, scale);
  seq.src_embed_drop = drop.mask(x.rows(), x.cols());
  apply_mask(x, seq.src_embed_drop);
  seq.enc_embedded = x;

  seq.enc_layers.assign(static_cast<std::size_t>(config.n_layers), EncoderLayerCache{});
  for (int l = 0; l < config.n_layers; ++l) {
    EncoderLayerCache& lc = seq.enc_layers[static_cast<std::size_t>(l)];
    const std::string attn_prefix = layer_name("enc", l, "attn");
    Matrix a = attention_forward(x, x, attention_params(params, attn_prefix),
                                 config.n_heads, false, lc.attn);
    lc.attn_drop = drop.mask(a.rows(), a.cols());
    apply_mask(a, lc.attn_drop);
    x = layer_norm_forward(x + a, params.at(layer_name("enc", l, "ln1.g")),
                           params.at(layer_name("enc", l, "ln1.b")), lc.ln1);
    Matrix f = ffn_forward(x, params, layer_name("enc", l, "ffn"), lc.ffn);
    lc.ffn_drop = drop.mask(f.rows(), f.cols());
    apply_mask(f, lc.ffn_drop);
    x = layer_norm_forward(x + f, params.at(layer_name("enc", l, "ln2.g")),
                           params.at(layer_name("enc", l, "ln2.b")), lc.ln2);
  }
  seq.memory = x;

  Matrix y = embed_ids(embed_table, seq.dec_input_ids, pe, scale);
  seq.tgt_embed_drop = drop.mask(y.rows(), y.cols());
  apply_mask(y, seq.tgt_embed_drop);
  seq.dec_embedded = y;

  seq.dec_layers.assign(static_cast<std::size_t>(config.n_layers), DecoderLayerCache{});
  for (int l = 0; l < config.n_layers; ++l) {
    DecoderLayerCache& lc = seq.dec_layers[static_cast<std::size_t>(l)];
    Matrix a = attention_forward(y, y,
                                 attention_params(params, layer_name("dec", l, "self")),
                                 config.n_heads, true, lc.self_attn);
    lc.self_drop = drop.mask(a.rows(), a.cols());
    apply_mask(a, lc.self_drop);
    y = layer_norm_forward(y + a, params.at(layer_name("dec", l, "ln1.g")),
                           params.at(layer_name("dec", l, "ln1.b")), lc.ln1);
    Matrix c = attention_forward(y, seq.memory,
                                 attention_params(params, layer_name("dec", l, "cross")),
                                 config.n_heads, false, lc.cross);
    lc.cross_drop = drop.mask(c.rows(), c.cols());
    apply_mask(c, lc.cross_drop);
    y = layer_norm_forward(y + c, params.at(layer_name("dec", l, "ln2.g")),
                           params.at(layer_name("dec", l, "ln2.b")), lc.ln2);
    Matrix f = ffn_forward(y, params, layer_name("dec", l, "ffn"), lc.ffn);
    lc.ffn_drop = drop.mask(f.rows(), f.cols());
    apply_mask(f, lc.ffn_drop);
    y = layer_norm_forward(y + f, params.at(layer_name("dec", l, "ln3.g")),
                           params.at(layer_name("dec", l, "ln3.b")), lc.ln3);
  }
  seq.dec_out = y;

  const Matrix& out_w =
      config.tie_output ? params.at("embed.tok") : params.at("out.w");
  if (config.tie_output) {
    seq.logits = y * out_w.transpose();
  } else {
    seq.logits = y * out_w;
  }
  seq.logits.rowwise() += params.at("out.b").row(0);
}

void backward_sequence(const ParameterStore& params, const ModelConfig& config,
                       const SequenceCache& seq, const Matrix& d_logits,
                       GradientStore& grads) {
  const double scale = std::sqrt(static_cast<double>(config.d_model));

  Matrix dy;
  if (config.tie_output) {
    grads.at("embed.tok") += d_logits.transpose() * seq.dec_out;
    dy = d_logits * params.at("embed.tok");
  } else {
    grads.at("out.w") += seq.dec_out.transpose() * d_logits;
    dy = d_logits * params.at("out.w").transpose();
  }
  grads.at("out.b").row(0) += d_logits.colwise().sum();

  Matrix d_memory = Matrix::Zero(seq.memory.rows(), seq.memory.cols());
  for (int l = config.n_layers - 1; l >= 0; --l) {
    const DecoderLayerCache& lc = seq.dec_layers[static_cast<std::size_t>(l)];
    Matrix dx = layer_norm_backward(dy, lc.ln3,
                                    params.at(layer_name("dec", l, "ln3.g")),
                                    grads.at(layer_name("dec", l, "ln3.g")),
                                    grads.at(layer_name("dec", l, "ln3.b")));
    Matrix df = dx;
    apply_mask(df, lc.ffn_drop);
    dy = dx + ffn_backward(df, lc.ffn, params, grads, layer_name("dec", l, "ffn"));

    dx = layer_norm_backward(dy, lc.ln2, params.at(layer_name("dec", l, "ln2.g")),
                             grads.at(layer_name("dec", l, "ln2.g")),
                             grads.at(layer_name("dec", l, "ln2.b")));
    Matrix dc = dx;
    apply_mask(dc, lc.cross_drop);
    const std::string cross_prefix = layer_name("dec", l, "cross");
    dy = dx + attention_backward(dc, lc.cross,
                                 attention_params(params, cross_prefix),
                                 attention_grads(grads, cross_prefix),
                                 config.n_heads, d_memory);

    dx = layer_norm_backward(dy, lc.ln1, params.at(layer_name("dec", l, "ln1.g")),
                             grads.at(layer_name("dec", l, "ln1.g")),
                             grads.at(layer_name("dec", l, "ln1.b")));
    Matrix da = dx;
    apply_mask(da, lc.self_drop);
    const std::string self_prefix = layer_name("dec", l, "self");
    Matrix d_self_kv = Matrix::Zero(dx.rows(), dx.cols());
    Matrix dq = attention_backward(da, lc.self_attn,
                                   attention_params(params, self_prefix),
                                   attention_grads(grads, self_prefix),
                                   config.n_heads, d_self_kv);
    dy = dx + dq + d_self_kv;
  }

  Matrix d_tgt_embed = dy;
  apply_mask(d_tgt_embed, seq.tgt_embed_drop);
  Matrix& d_embed = grads.at("embed.tok");
  for (std::size_t t = 0; t < seq.dec_input_ids.size(); ++t) {
    d_embed.row(seq.dec_input_ids[t]) +=
        scale * d_tgt_embed.row(static_cast<Eigen::Index>(t));
  }

  Matrix dx_enc = d_memory;
  for (int l = config.n_layers - 1; l >= 0; --l) {
    const EncoderLayerCache& lc = seq.enc_layers[static_cast<std::size_t>(l)];
    Matrix dx = layer_norm_backward(dx_enc, lc.ln2,
                                    params.at(layer_name("enc", l, "ln2.g")),
                                    grads.at(layer_name("enc", l, "ln2.g")),
                                    grads.at(layer_name("enc", l, "ln2.b")));
    Matrix df = dx;
    apply_mask(df, lc.ffn_drop);
    dx_enc = dx + ffn_backward(df, lc.ffn, params, grads, layer_name("enc", l, "ffn"));

    dx = layer_norm_backward(dx_enc, lc.ln1,
                             params.at(layer_name("enc", l, "ln1.g")),
                             grads.at(layer_name("enc", l, "ln1.g")),
                             grads.at(layer_name("enc", l, "ln1.b")));
    Matrix da = dx;
    apply_mask(da, lc.attn_drop);
    const std::string attn_prefix = layer_name("enc", l, "attn");
    Matrix d_kv = Matrix::Zero(dx.rows(), dx.cols());
    Matrix dq = attention_backward(da, lc.attn,
                                   attention_params(params, attn_prefix),
                                   attention_grads(grads, attn_prefix),
                                   config.n_heads, d_kv);
    dx_enc = dx + dq + d_kv;
  }

  Matrix d_src_embed = dx_enc;
  apply_mask(d_src_embed, seq.src_embed_drop);
  for (std::size_t t = 0; t < seq.src_ids.size(); ++t) {
    d_embed.row(seq.src_ids[t]) +=
        scale * d_src_embed.row(static_cast<Eigen::Index>(t));
  }
}

void prepare_sequences(const ModelConfig& config, const Batch& batch,
                       ForwardCache& cache) {
  cache.sequences.assign(static_cast<std::size_t>(batch.size()), SequenceCache{});
  for (int b = 0; b < batch.size(); ++b) {
    SequenceCache& seq = cache.sequences[static_cast<std::size_t>(b)];
    const int src_len = batch.source_len(b);
    const int tgt_len = batch.target_len(b);
    if (src_len == 0) {
      throw Error(ErrorCode::EmptyInput, "empty source row " + std::to_string(b));
    }
    if (tgt_len == 0) {
      throw Error(ErrorCode::EmptyInput, "empty target row " + std::to_string(b));
    }
    if (src_len > config.max_len || tgt_len > config.max_len) {
      throw Error(ErrorCode::SequenceTooLong,
                  "sequence exceeds max_len " + std::to_string(config.max_len));
    }
    seq.src_ids.resize(static_cast<std::size_t>(src_len));
    for (int t = 0; t < src_len; ++t) seq.src_ids[static_cast<std::size_t>(t)] = batch.source(b, t);
    seq.dec_input_ids.resize(static_cast<std::size_t>(tgt_len));
    seq.gold_ids.resize(static_cast<std::size_t>(tgt_len));
    seq.dec_input_ids[0] = kBosId;
    for (int t = 0; t < tgt_len; ++t) {
      seq.gold_ids[static_cast<std::size_t>(t)] = batch.target(b, t);
      if (t >= 1) seq.dec_input_ids[static_cast<std::size_t>(t)] = batch.target(b, t - 1);
    }
    check_ids(seq.src_ids, config.vocab_size);
    check_ids(seq.gold_ids, config.vocab_size);
  }
}

}  // namespace

std::vector<Matrix> forward(const ParameterStore& params, const ModelConfig& config,
                            const Batch& batch, ForwardCache* cache,
                            bool train_mode, std::uint64_t dropout_seed) {
  config.validate();
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  prepare_sequences(config, batch, fc);

  int longest = 2;
  for (const auto& seq : fc.sequences) {
    longest = std::max ({longest, static_cast<int>(seq.src_ids.size()),
                         static_cast<int>(seq.dec_input_ids.size())});
  }
  const Matrix pe = sinusoidal_encoding(longest, config.d_model);

  std::vector<Matrix> logits;
  logits.reserve(fc.sequences.size());
  for (std::size_t b = 0; b < fc.sequences.size(); ++b) {
    DropoutStream drop(mix64(dropout_seed, b), config.dropout_rate, train_mode);
    forward_sequence(params, config, fc.sequences[b], pe, drop);
    logits.push_back(fc.sequences[b].logits);
  }
  return logits;
}

namespace {

// Smoothed cross-entropy at one position; returns loss and writes p - q
// (unscaled) into d_row when requested.
double position_loss(const RowVector& logit_row, TokenId gold, double eps,
                     int vocab_size, RowVector* d_row) {
  const double max = logit_row.maxCoeff();
  RowVector shifted = (logit_row.array() - max).matrix();
  const double lse = std::log(shifted.array().exp().sum());
  const double uniform = eps / static_cast<double>(vocab_size - 1);

  double loss = 0.0;
  // -(1-eps) log p[gold]
  loss -= (1.0 - eps) * (shifted(gold) - lse);
  if (eps > 0.0) {
    double sum_logp = 0.0;
    for (int v = 0; v < vocab_size; ++v) {
      if (v == kPadId) continue;
      sum_logp += shifted(v) - lse;
    }
    loss -= uniform * sum_logp;
  }
  if (d_row) {
    *d_row = (shifted.array() - lse).exp().matrix();  // softmax
    for (int v = 0; v < vocab_size; ++v) {
      if (v == kPadId) continue;
      (*d_row)(v) -= uniform;
    }
    (*d_row)(gold) -= 1.0 - eps;
  }
  return loss;
}

}  // namespace

double loss_value(const std::vector<Matrix>& logits, const Batch& batch,
                  double label_smoothing, BatchStats* stats) {
  long long count = 0;
  for (int b = 0; b < batch.size(); ++b) count += batch.target_len(b);
  if (count == 0) throw Error(ErrorCode::AllPadded, "no scored target positions");

  double total = 0.0;
  for (int b = 0; b < batch.size(); ++b) {
    const Matrix& rows = logits[static_cast<std::size_t>(b)];
    const int tgt_len = batch.target_len(b);
    for (int t = 0; t < tgt_len; ++t) {
      total += position_loss(rows.row(t), batch.target(b, t), label_smoothing,
                             static_cast<int>(rows.cols()), nullptr);
    }
  }
  const double mean = total / static_cast<double>(count);
  if (stats) {
    stats->loss_mean = mean;
    stats->loss_sum = total;
    stats->tokens = count;
  }
  return mean;
}

GradientStore gradients(const ParameterStore& params, const ModelConfig& config,
                        const Batch& batch, double label_smoothing,
                        BatchStats* stats, bool train_mode,
                        std::uint64_t dropout_seed) {
  ForwardCache cache;
  forward(params, config, batch, &cache, train_mode, dropout_seed);

  long long count = 0;
  for (int b = 0; b < batch.size(); ++b) count += batch.target_len(b);
  if (count == 0) throw Error(ErrorCode::AllPadded, "no scored target positions");
  const double inv_count = 1.0 / static_cast<double>(count);

  GradientStore grads = make_store_layout(config);
  grads.stage = params.stage;
  grads.seed = params.seed;
  grads.step = params.step;

  double total = 0.0;
  for (std::size_t b = 0; b < cache.sequences.size(); ++b) {
    SequenceCache& seq = cache.sequences[b];
    const Eigen::Index tgt_len = static_cast<Eigen::Index>(seq.gold_ids.size());
    Matrix d_logits(tgt_len, config.vocab_size);
    RowVector d_row(config.vocab_size);
    for (Eigen::Index t = 0; t < tgt_len; ++t) {
      total += position_loss(seq.logits.row(t), seq.gold_ids[static_cast<std::size_t>(t)],
                             label_smoothing, config.vocab_size, &d_row);
      d_logits.row(t) = d_row * inv_count;
    }
    backward_sequence(params, config, seq, d_logits, grads);
  }
  if (stats) {
    stats->loss_mean = total * inv_count;
    stats->loss_sum = total;
    stats->tokens = count;
  }
  return grads;
}

Matrix encode_source(const ParameterStore& params, const ModelConfig& config,
                     const std::vector<TokenId>& src_ids) {
  if (src_ids.empty()) throw Error(ErrorCode::EmptyInput, "empty source");
  if (static_cast<int>(src_ids.size()) > config.max_len) {
    throw Error(ErrorCode::SequenceTooLong, "source exceeds max_len");
  }
  check_ids(src_ids, config.vocab_size);
  SequenceCache seq;
  seq.src_ids = src_ids;
  seq.dec_input_ids = {kBosId};
  const Matrix pe = sinusoidal_encoding(
      std::max(2, static_cast<int>(src_ids.size())), config.d_model);
  DropoutStream drop(0, 0.0, false);
  forward_sequence(params, config, seq, pe, drop);
  return seq.memory;
}

RowVector next_token_logits(const ParameterStore& params, const ModelConfig& config,
                            const Matrix& memory,
                            const std::vector<TokenId>& dec_input_ids) {
  check_ids(dec_input_ids, config.vocab_size);
  SequenceCache seq;
  seq.src_ids = {kBosId};  // placeholder; encoder is not rerun
  seq.dec_input_ids = dec_input_ids;
  const Matrix pe = sinusoidal_encoding(
      std::max(2, static_cast<int>(dec_input_ids.size())), config.d_model);

  // Decoder-only pass against the precomputed memory.
  const double scale = std::sqrt(static_cast<double>(config.d_model));
  const Matrix& embed_table = params.at("embed.tok");
  Matrix y = embed_ids(embed_table, dec_input_ids, pe, scale);
  for (int l = 0; l < config.n_layers; ++l) {
    AttentionCache self_cache, cross_cache;
    LayerNormCache ln_cache;
    FfnCache ffn_cache;
    Matrix a = attention_forward(y, y,
                                 attention_params(params, layer_name("dec", l, "self")),
                                 config.n_heads, true, self_cache);
    y = layer_norm_forward(y + a, params.at(layer_name("dec", l, "ln1.g")),
                           params.at(layer_name("dec", l, "ln1.b")), ln_cache);
    Matrix c = attention_forward(y, memory,
                                 attention_params(params, layer_name("dec", l, "cross")),
                                 config.n_heads, false, cross_cache);
    y = layer_norm_forward(y + c, params.at(layer_name("dec", l, "ln2.g")),
                           params.at(layer_name("dec", l, "ln2.b")), ln_cache);
    Matrix f = ffn_forward(y, params, layer_name("dec", l, "ffn"), ffn_cache);
    y = layer_norm_forward(y + f, params.at(layer_name("dec", l, "ln3.g")),
                           params.at(layer_name("dec", l, "ln3.b")), ln_cache);
  }
  RowVector logits;
  if (config.tie_output) {
    logits = y.row(y.rows() - 1) * params.at("embed.tok").transpose();
  } else {
    logits = y.row(y.rows() - 1) * params.at("out.w");
  }
  logits += params.at("out.b").row(0);
  return logits;
}

}  // namespace coregen

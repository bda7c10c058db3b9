#include "coregen/decode.hpp"

#include <algorithm>
#include <cmath>

namespace coregen {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw Error(ErrorCode::InvalidConfig, "beam_size must be >= 1");
  if (max_len < 1) throw Error(ErrorCode::InvalidConfig, "max_len must be >= 1");
  if (length_penalty < 0.0) {
    throw Error(ErrorCode::InvalidConfig, "length_penalty must be >= 0");
  }
}

namespace {

RowVector log_softmax(const RowVector& logits) {
  const double max = logits.maxCoeff();
  RowVector shifted = (logits.array() - max).matrix();
  const double lse = std::log(shifted.array().exp().sum());
  return (shifted.array() - lse).matrix();
}

TokenId lowest_argmax(const RowVector& row) {
  TokenId best = 0;
  double best_score = row(0);
  for (Eigen::Index v = 1; v < row.size(); ++v) {
    if (row(v) > best_score) {
      best_score = row(v);
      best = static_cast<TokenId>(v);
    }
  }
  return best;
}

// Training scores target[t] from the shifted target, whose first two inputs
// are both BOS (the shift pushes the target's own BOS to index 1). Prefixes
// here replicate that layout exactly.
std::vector<TokenId> decoder_prefix(const std::vector<TokenId>& emitted) {
  std::vector<TokenId> dec_inputs = {kBosId, kBosId};
  dec_inputs.insert(dec_inputs.end(), emitted.begin(), emitted.end());
  return dec_inputs;
}

std::vector<TokenId> greedy(const ParameterStore& params, const ModelConfig& config,
                            const Matrix& memory, const DecodeConfig& decode) {
  std::vector<TokenId> out;
  while (static_cast<int>(out.size()) < decode.max_len) {
    const std::vector<TokenId> dec_inputs = decoder_prefix(out);
    if (static_cast<int>(dec_inputs.size()) > config.max_len) break;
    const RowVector logits = next_token_logits(params, config, memory, dec_inputs);
    const TokenId next = lowest_argmax(logits);
    if (next == kEosId) break;
    out.push_back(next);
  }
  return out;
}

struct Hypothesis {
  std::vector<TokenId> out;
  double log_prob = 0.0;
};

double normalized_score(const Hypothesis& hyp, double alpha) {
  if (alpha <= 0.0) return hyp.log_prob;
  const double len = std::max<std::size_t>(1, hyp.out.size());
  return hyp.log_prob / std::pow(len, alpha);
}

bool lexicographically_before(const std::vector<TokenId>& a,
                              const std::vector<TokenId>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

std::vector<TokenId> beam(const ParameterStore& params, const ModelConfig& config,
                          const Matrix& memory, const DecodeConfig& decode) {
  std::vector<Hypothesis> live = {{}};
  std::vector<Hypothesis> finished;

  for (int step = 0; step < decode.max_len && !live.empty(); ++step) {
    struct Candidate {
      std::size_t parent;
      TokenId token;
      double log_prob;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * static_cast<std::size_t>(config.vocab_size));
    for (std::size_t h = 0; h < live.size(); ++h) {
      const std::vector<TokenId> dec_inputs = decoder_prefix(live[h].out);
      if (static_cast<int>(dec_inputs.size()) > config.max_len) {
        finished.push_back(live[h]);  // cannot extend past the model window
        continue;
      }
      const RowVector lp =
          log_softmax(next_token_logits(params, config, memory, dec_inputs));
      for (Eigen::Index v = 0; v < lp.size(); ++v) {
        candidates.push_back({h, static_cast<TokenId>(v), live[h].log_prob + lp(v)});
      }
    }
    if (candidates.empty()) break;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) {
                       if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                       if (a.parent != b.parent) return a.parent < b.parent;
                       return a.token < b.token;
                     });

    std::vector<Hypothesis> next_live;
    int taken = 0;  // finished hypotheses occupy beam slots too
    for (const Candidate& cand : candidates) {
      if (taken >= decode.beam_size) break;
      ++taken;
      Hypothesis hyp = live[cand.parent];
      hyp.log_prob = cand.log_prob;
      if (cand.token == kEosId) {
        finished.push_back(std::move(hyp));
        continue;
      }
      hyp.out.push_back(cand.token);
      next_live.push_back(std::move(hyp));
    }
    live = std::move(next_live);
  }
  // anything still alive is truncated at the cap
  for (Hypothesis& hyp : live) finished.push_back(std::move(hyp));
  if (finished.empty()) return {};

  std::size_t best = 0;
  double best_score = normalized_score(finished[0], decode.length_penalty);
  for (std::size_t i = 1; i < finished.size(); ++i) {
    const double score = normalized_score(finished[i], decode.length_penalty);
    if (score > best_score ||
        (score == best_score &&
         lexicographically_before(finished[i].out, finished[best].out))) {
      best = i;
      best_score = score;
    }
  }
  return finished[best].out;
}

}  // namespace

std::vector<TokenId> generate(const ParameterStore& params,
                              const ModelConfig& config,
                              const std::vector<TokenId>& source_ids,
                              const DecodeConfig& decode) {
  decode.validate();
  const Matrix memory = encode_source(params, config, source_ids);
  if (decode.strategy == DecodeStrategy::Greedy) {
    return greedy(params, config, memory, decode);
  }
  return beam(params, config, memory, decode);
}

}  // namespace coregen

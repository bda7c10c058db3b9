#pragma once

#include "coregen/model.hpp"

namespace coregen {

enum class DecodeStrategy { Greedy, Beam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::Greedy;
  int beam_size = 4;
  int max_len = 30;           // emitted tokens, BOS/EOS excluded
  double length_penalty = 0.0;  // 0 disables normalization

  void validate() const;
};

// Emits token ids without BOS/EOS. Greedy appends the lowest-id argmax until
// EOS or the cap; beam search is length-normalized with deterministic
// tie-breaking (score, then lexicographic token ids).
std::vector<TokenId> generate(const ParameterStore& params,
                              const ModelConfig& config,
                              const std::vector<TokenId>& source_ids,
                              const DecodeConfig& decode);

}  // namespace coregen

#pragma once

#include "coregen/corpus.hpp"
#include "coregen/rng.hpp"

#include <optional>

namespace coregen {

enum class StageOneTask { ChangesPrediction, MaskedFragment, InStatementMask };

const char* stage_one_task_name(StageOneTask task);

struct MaskSpan {
  int line = 0;
  int start = 0;  // inclusive, in line-token coordinates (marker excluded)
  int end = 0;    // exclusive
};

struct StageOneSample {
  StageOneTask task = StageOneTask::ChangesPrediction;
  Tokens source;
  Tokens target;
  std::optional<MaskSpan> mask_span;
  int origin_id = 0;
};

struct MaskPolicy {
  double mask_rate = 0.5;  // fraction of the longest line, in (0,1)

  // floor(rate * line_len) clamped to at least one token
  int span_length(int line_len) const;
};

StageOneSample make_change_pair(const TokenizedCommit& commit);

// Longest line by content-token count; ties resolved to the lowest index.
int select_longest_line(const TokenizedCommit& commit);

StageOneSample make_masked_sample(const TokenizedCommit& commit,
                                  const MaskPolicy& policy, Rng& rng);

std::vector<StageOneSample> make_icsm_samples(const TokenizedCommit& commit,
                                              Rng& rng, int max_per_commit);

struct StageOneOptions {
  MaskPolicy policy;
  bool icsm_enabled = false;
  int icsm_max_per_commit = 8;
};

// One ChangesPrediction sample per explicit-change commit (plus its
// in-statement samples when enabled) and one freshly drawn MaskedFragment
// sample per implicit-change commit. Draws come from per-commit streams
// seeded by (seed, epoch, commit id) so parallel and serial builds agree.
std::vector<StageOneSample> build_stage_one_dataset(
    const std::vector<TokenizedCommit>& corpus, const StageOneOptions& options,
    std::uint64_t seed, std::uint64_t epoch);

}  // namespace coregen

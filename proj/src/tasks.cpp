#include "coregen/tasks.hpp"

#include <algorithm>
#include <cmath>

namespace coregen {

const char* stage_one_task_name(StageOneTask task) {
  switch (task) {
    case StageOneTask::ChangesPrediction: return "changes_prediction";
    case StageOneTask::MaskedFragment: return "masked_fragment";
    case StageOneTask::InStatementMask: return "in_statement_mask";
  }
  return "?";
}

int MaskPolicy::span_length(int line_len) const {
  const int len = static_cast<int>(std::floor(mask_rate * line_len));
  return std::max(1, len);
}

StageOneSample make_change_pair(const TokenizedCommit& commit) {
  if (commit.category != ChangeCategory::ExplicitChange) {
    throw Error(ErrorCode::WrongCategory,
                "change pair requires an explicit-change commit");
  }
  StageOneSample sample;
  sample.task = StageOneTask::ChangesPrediction;
  sample.source = commit.before_tokens;
  sample.target = commit.after_tokens;
  sample.origin_id = commit.record.id;
  return sample;
}

int select_longest_line(const TokenizedCommit& commit) {
  int best = 0;
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < commit.lines.size(); ++i) {
    if (commit.lines[i].tokens.size() > best_len) {
      best_len = commit.lines[i].tokens.size();
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

// Full commit sequence with [start, end) of line `k` (content-token
// coordinates) replaced by one mask sentinel per position.
Tokens mask_line_span(const TokenizedCommit& commit, int k, int start, int end) {
  Tokens source = commit.record.diff_tokens;
  const int base = commit.line_offsets[static_cast<std::size_t>(k)];
  for (int i = start; i < end; ++i) {
    source[static_cast<std::size_t>(base + i)] = kMaskToken;
  }
  return source;
}

}  // namespace

StageOneSample make_masked_sample(const TokenizedCommit& commit,
                                  const MaskPolicy& policy, Rng& rng) {
  if (commit.category != ChangeCategory::ImplicitChange) {
    throw Error(ErrorCode::WrongCategory,
                "masked fragment requires an implicit-change commit");
  }
  const int k = select_longest_line(commit);
  const auto& line = commit.lines[static_cast<std::size_t>(k)].tokens;
  const int line_len = static_cast<int>(line.size());
  if (line_len == 0) {
    throw Error(ErrorCode::EmptyLine, "longest line has no tokens");
  }
  const int span = policy.span_length(line_len);
  const int start =
      static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(line_len - span + 1)));

  StageOneSample sample;
  sample.task = StageOneTask::MaskedFragment;
  sample.origin_id = commit.record.id;
  sample.mask_span = MaskSpan{k, start, start + span};
  sample.source = mask_line_span(commit, k, start, start + span);
  sample.target.assign(line.begin() + start, line.begin() + start + span);
  return sample;
}

std::vector<StageOneSample> make_icsm_samples(const TokenizedCommit& commit,
                                              Rng& rng, int max_per_commit) {
  std::vector<StageOneSample> samples;
  if (commit.category != ChangeCategory::ExplicitChange) return samples;

  std::vector<int> eligible;
  for (std::size_t i = 0; i < commit.lines.size(); ++i) {
    if (commit.lines[i].tokens.size() >= 2) eligible.push_back(static_cast<int>(i));
  }
  if (eligible.empty()) return samples;

  if (static_cast<int>(eligible.size()) > max_per_commit) {
    rng.shuffle(eligible);
    eligible.resize(static_cast<std::size_t>(max_per_commit));
    std::sort(eligible.begin(), eligible.end());
  }
  for (int k : eligible) {
    const auto& line = commit.lines[static_cast<std::size_t>(k)].tokens;
    const int u =
        static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(line.size())));
    StageOneSample sample;
    sample.task = StageOneTask::InStatementMask;
    sample.origin_id = commit.record.id;
    sample.mask_span = MaskSpan{k, u, u + 1};
    sample.source = mask_line_span(commit, k, u, u + 1);
    sample.target = {line[static_cast<std::size_t>(u)]};
    samples.push_back(std::move(sample));
  }
  return samples;
}

std::vector<StageOneSample> build_stage_one_dataset(
    const std::vector<TokenizedCommit>& corpus, const StageOneOptions& options,
    std::uint64_t seed, std::uint64_t epoch) {
  std::vector<StageOneSample> samples;
  for (const TokenizedCommit& commit : corpus) {
    Rng rng(mix64(seed, epoch, static_cast<std::uint64_t>(commit.record.id)));
    if (commit.category == ChangeCategory::ExplicitChange) {
      samples.push_back(make_change_pair(commit));
      if (options.icsm_enabled) {
        auto icsm = make_icsm_samples(commit, rng, options.icsm_max_per_commit);
        samples.insert(samples.end(), std::make_move_iterator(icsm.begin()),
                       std::make_move_iterator(icsm.end()));
      }
    } else {
      samples.push_back(make_masked_sample(commit, options.policy, rng));
    }
  }
  return samples;
}

}  // namespace coregen

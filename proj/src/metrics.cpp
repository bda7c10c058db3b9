#include "coregen/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

namespace coregen {

namespace {

constexpr double kMeteorAlpha = 0.9;
constexpr double kMeteorBeta = 3.0;
constexpr double kMeteorGamma = 0.5;

using NgramCounts = std::unordered_map<std::string, long long>;

NgramCounts count_ngrams(const Tokens& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key;
    for (int j = 0; j < n; ++j) {
      key += tokens[i + static_cast<std::size_t>(j)];
      key += '\x1f';
    }
    ++counts[key];
  }
  return counts;
}

long long clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  long long overlap = 0;
  for (const auto& [gram, count] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

void check_aligned(const TokenCorpus& candidates, const TokenCorpus& references) {
  if (candidates.size() != references.size()) {
    throw Error(ErrorCode::LengthMismatch,
                "candidate/reference counts differ: " +
                    std::to_string(candidates.size()) + " vs " +
                    std::to_string(references.size()));
  }
}

}  // namespace

double corpus_bleu4(const TokenCorpus& candidates, const TokenCorpus& references) {
  check_aligned(candidates, references);
  if (candidates.empty()) throw Error(ErrorCode::EmptyCorpus, "no sentence pairs");

  long long num[4] = {0, 0, 0, 0};
  long long den[4] = {0, 0, 0, 0};
  long long cand_len = 0;
  long long ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens& cand = candidates[i];
    const Tokens& ref = references[i];
    cand_len += static_cast<long long>(cand.size());
    ref_len += static_cast<long long>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      const auto cand_grams = count_ngrams(cand, n);
      const auto ref_grams = count_ngrams(ref, n);
      num[n - 1] += clipped_overlap(cand_grams, ref_grams);
      den[n - 1] += std::max<long long>(0, static_cast<long long>(cand.size()) - n + 1);
    }
  }
  if (cand_len == 0) return 0.0;
  double log_precision = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (num[n] == 0) return 0.0;
    log_precision += 0.25 * std::log(static_cast<double>(num[n]) /
                                     static_cast<double>(den[n]));
  }
  const double bp =
      cand_len < ref_len
          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len))
          : 1.0;
  return 100.0 * bp * std::exp(log_precision);
}

double sentence_bleu4_smoothed(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) {
    throw Error(ErrorCode::EmptyInput, "smoothed BLEU requires non-empty inputs");
  }
  double log_precision = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto cand_grams = count_ngrams(candidate, n);
    const auto ref_grams = count_ngrams(reference, n);
    long long num = clipped_overlap(cand_grams, ref_grams);
    long long den =
        std::max<long long>(0, static_cast<long long>(candidate.size()) - n + 1);
    if (n >= 2) {  // add-one smoothing
      ++num;
      ++den;
    }
    if (num == 0 || den == 0) return 0.0;
    log_precision +=
        0.25 * std::log(static_cast<double>(num) / static_cast<double>(den));
  }
  const double bp = candidate.size() < reference.size()
                        ? std::exp(1.0 - static_cast<double>(reference.size()) /
                                             static_cast<double>(candidate.size()))
                        : 1.0;
  return 100.0 * bp * std::exp(log_precision);
}

namespace {

double f1(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

double rouge_n_sentence(const Tokens& cand, const Tokens& ref, int n) {
  const long long cand_grams = std::max<long long>(
      0, static_cast<long long>(cand.size()) - n + 1);
  const long long ref_grams =
      std::max<long long>(0, static_cast<long long>(ref.size()) - n + 1);
  if (cand_grams == 0 || ref_grams == 0) return 0.0;
  const long long overlap =
      clipped_overlap(count_ngrams(cand, n), count_ngrams(ref, n));
  return f1(static_cast<double>(overlap) / static_cast<double>(cand_grams),
            static_cast<double>(overlap) / static_cast<double>(ref_grams));
}

int lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int> prev(b.size() + 1, 0);
  std::vector<int> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_n(const TokenCorpus& candidates, const TokenCorpus& references, int n) {
  check_aligned(candidates, references);
  if (candidates.empty()) throw Error(ErrorCode::EmptyCorpus, "no sentence pairs");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    total += rouge_n_sentence(candidates[i], references[i], n);
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

double rouge_l(const TokenCorpus& candidates, const TokenCorpus& references) {
  check_aligned(candidates, references);
  if (candidates.empty()) throw Error(ErrorCode::EmptyCorpus, "no sentence pairs");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Tokens& cand = candidates[i];
    const Tokens& ref = references[i];
    if (cand.empty() || ref.empty()) continue;
    const int lcs = lcs_length(cand, ref);
    total += f1(static_cast<double>(lcs) / static_cast<double>(cand.size()),
                static_cast<double>(lcs) / static_cast<double>(ref.size()));
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

namespace {

// Search state for the chunk-minimizing alignment. Candidate positions are
// assigned in order; per-token match quotas enforce alignment maximality, so
// the search only ranks maximum alignments by chunk count.
struct AlignSearch {
  const std::vector<int>* cand_group;     // token-group id per candidate position
  const std::vector<std::vector<int>>* ref_positions;  // group id -> ref positions
  std::vector<int> quota;                 // matches still required per group
  std::vector<int> cand_remaining;        // candidate occurrences left per group
  std::vector<bool> ref_used;
  int best_chunks = 0;
  long long nodes = 0;
  static constexpr long long kNodeBudget = 4'000'000;

  void run(std::size_t i, int chunks, int prev_ref) {
    if (chunks >= best_chunks) return;
    if (i == cand_group->size()) {
      best_chunks = chunks;
      return;
    }
    if (++nodes > kNodeBudget) return;
    const int group = (*cand_group)[i];
    if (group >= 0 && quota[static_cast<std::size_t>(group)] > 0) {
      auto& positions = (*ref_positions)[static_cast<std::size_t>(group)];
      // Diagonal continuation first: it is the only zero-cost choice.
      const int cont = prev_ref + 1;
      auto try_ref = [&](int j) {
        if (ref_used[static_cast<std::size_t>(j)]) return;
        ref_used[static_cast<std::size_t>(j)] = true;
        --quota[static_cast<std::size_t>(group)];
        --cand_remaining[static_cast<std::size_t>(group)];
        run(i + 1, chunks + (j == cont ? 0 : 1), j);
        ++cand_remaining[static_cast<std::size_t>(group)];
        ++quota[static_cast<std::size_t>(group)];
        ref_used[static_cast<std::size_t>(j)] = false;
      };
      if (prev_ref >= 0 && cont < static_cast<int>(ref_used.size()) &&
          std::binary_search(positions.begin(), positions.end(), cont)) {
        try_ref(cont);
      }
      for (int j : positions) {
        if (j != cont) try_ref(j);
      }
    }
    // Skip position i if the quota can still be met by later occurrences.
    if (group < 0 ||
        cand_remaining[static_cast<std::size_t>(group)] - 1 >=
            quota[static_cast<std::size_t>(group)]) {
      if (group >= 0) --cand_remaining[static_cast<std::size_t>(group)];
      run(i + 1, chunks, -2);
      if (group >= 0) ++cand_remaining[static_cast<std::size_t>(group)];
    }
  }
};

}  // namespace

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  std::unordered_map<std::string, int> group_of;
  std::vector<std::vector<int>> ref_positions;
  for (std::size_t j = 0; j < reference.size(); ++j) {
    auto [it, inserted] =
        group_of.try_emplace(reference[j], static_cast<int>(ref_positions.size()));
    if (inserted) ref_positions.emplace_back();
    ref_positions[static_cast<std::size_t>(it->second)].push_back(static_cast<int>(j));
  }

  std::vector<int> cand_group(candidate.size(), -1);
  std::vector<int> cand_count(ref_positions.size(), 0);
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    auto it = group_of.find(candidate[i]);
    if (it != group_of.end()) {
      cand_group[i] = it->second;
      ++cand_count[static_cast<std::size_t>(it->second)];
    }
  }

  MeteorAlignment result;
  std::vector<int> quota(ref_positions.size());
  for (std::size_t g = 0; g < ref_positions.size(); ++g) {
    quota[g] = std::min(cand_count[g], static_cast<int>(ref_positions[g].size()));
    result.matches += quota[g];
  }
  if (result.matches == 0) return result;

  AlignSearch search;
  search.cand_group = &cand_group;
  search.ref_positions = &ref_positions;
  search.quota = quota;
  search.cand_remaining = cand_count;
  search.ref_used.assign(reference.size(), false);
  search.best_chunks = result.matches + 1;
  search.run(0, 0, -2);
  result.chunks = search.best_chunks;
  return result;
}

double meteor_sentence(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const MeteorAlignment align = meteor_align(candidate, reference);
  if (align.matches == 0) return 0.0;
  const double m = static_cast<double>(align.matches);
  const double precision = m / static_cast<double>(candidate.size());
  const double recall = m / static_cast<double>(reference.size());
  const double f_mean =
      precision * recall / (kMeteorAlpha * precision + (1.0 - kMeteorAlpha) * recall);
  const double penalty =
      kMeteorGamma * std::pow(static_cast<double>(align.chunks) / m, kMeteorBeta);
  return f_mean * (1.0 - penalty);
}

double meteor(const TokenCorpus& candidates, const TokenCorpus& references) {
  check_aligned(candidates, references);
  if (candidates.empty()) throw Error(ErrorCode::EmptyCorpus, "no sentence pairs");
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    total += meteor_sentence(candidates[i], references[i]);
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

MetricReport evaluate_corpus(const TokenCorpus& candidates,
                             const TokenCorpus& references) {
  check_aligned(candidates, references);
  MetricReport report;
  report.bleu4 = corpus_bleu4(candidates, references);
  report.rouge1 = rouge_n(candidates, references, 1);
  report.rouge2 = rouge_n(candidates, references, 2);
  report.rougeL = rouge_l(candidates, references);
  report.meteor = meteor(candidates, references);
  report.sentences = static_cast<int>(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    report.candidate_tokens += static_cast<long long>(candidates[i].size());
    report.reference_tokens += static_cast<long long>(references[i].size());
  }
  return report;
}

TokenCorpus read_token_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  TokenCorpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    corpus.push_back(split_whitespace(line));
  }
  return corpus;
}

MetricReport evaluate_corpus_files(const std::string& candidate_path,
                                   const std::string& reference_path) {
  return evaluate_corpus(read_token_lines(candidate_path),
                         read_token_lines(reference_path));
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["bleu4"] = bleu4;
  j["rouge1"] = rouge1;
  j["rouge2"] = rouge2;
  j["rougeL"] = rougeL;
  j["meteor"] = meteor;
  j["counts"] = {{"sentences", sentences},
                 {"candidate_tokens", candidate_tokens},
                 {"reference_tokens", reference_tokens}};
  j["variants"] = {{"bleu", "corpus_bleu4_unsmoothed"},
                   {"rouge", "sentence_f1_mean"},
                   {"meteor", "exact_match alpha=0.9 beta=3 gamma=0.5"}};
  return j.dump(2);
}

}  // namespace coregen

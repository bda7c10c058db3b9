#include "coregen/baseline.hpp"

#include "coregen/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace coregen {

RetrievalIndex::RetrievalIndex(const std::vector<CommitRecord>& train, int k)
    : k_(k) {
  if (train.empty()) throw Error(ErrorCode::EmptyCorpus, "empty retrieval corpus");
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "k must be >= 1");
  entries_.reserve(train.size());
  for (const CommitRecord& rec : train) {
    std::unordered_map<int, double> counts;
    for (const std::string& tok : rec.diff_tokens) {
      const auto it = term_ids_.try_emplace(tok, static_cast<int>(term_ids_.size())).first;
      ++counts[it->second];
    }
    Entry entry;
    entry.counts.assign(counts.begin(), counts.end());
    std::sort(entry.counts.begin(), entry.counts.end());
    double sq = 0.0;
    for (const auto& [term, freq] : entry.counts) sq += freq * freq;
    entry.norm = std::sqrt(sq);
    entry.diff = rec.diff_tokens;
    entry.message = rec.msg_tokens;
    entries_.push_back(std::move(entry));
  }
}

double RetrievalIndex::term_frequency(int id, const std::string& token) const {
  const auto term = term_ids_.find(token);
  if (term == term_ids_.end()) return 0.0;
  const auto& counts = entries_[static_cast<std::size_t>(id)].counts;
  const auto it = std::lower_bound(
      counts.begin(), counts.end(), term->second,
      [](const std::pair<int, double>& a, int b) { return a.first < b; });
  return it != counts.end() && it->first == term->second ? it->second : 0.0;
}

std::vector<std::pair<double, int>> RetrievalIndex::scored_top_k(
    const Tokens& query_diff) const {
  if (query_diff.empty()) throw Error(ErrorCode::EmptyQuery, "empty query diff");

  // Project the query onto the index vocabulary; unseen terms contribute 0.
  std::unordered_map<int, double> query_counts;
  for (const std::string& tok : query_diff) {
    auto it = term_ids_.find(tok);
    if (it != term_ids_.end()) ++query_counts[it->second];
  }
  double query_sq = 0.0;
  for (const auto& [term, freq] : query_counts) query_sq += freq * freq;
  const double query_norm = std::sqrt(query_sq);

  std::vector<std::pair<double, int>> scored;  // (cosine, id)
  scored.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Entry& entry = entries_[i];
    double dot = 0.0;
    if (query_norm > 0.0) {
      for (const auto& [term, freq] : entry.counts) {
        auto it = query_counts.find(term);
        if (it != query_counts.end()) dot += freq * it->second;
      }
    }
    const double denom = entry.norm * query_norm;
    scored.emplace_back(denom > 0.0 ? dot / denom : 0.0, static_cast<int>(i));
  }

  const std::size_t top = std::min<std::size_t>(static_cast<std::size_t>(k_),
                                                scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top),
                    scored.end(), [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;  // ties to the lower id
                    });
  scored.resize(top);
  return scored;
}

std::vector<int> RetrievalIndex::top_k(const Tokens& query_diff) const {
  std::vector<int> ids;
  for (const auto& [cosine, id] : scored_top_k(query_diff)) ids.push_back(id);
  return ids;
}

Tokens RetrievalIndex::generate(const Tokens& query_diff) const {
  const auto scored = scored_top_k(query_diff);

  int best_id = scored[0].second;
  double best_bleu = -1.0;
  double best_cosine = 0.0;
  for (const auto& [cosine, id] : scored) {
    const double bleu =
        sentence_bleu4_smoothed(entries_[static_cast<std::size_t>(id)].diff, query_diff);
    const bool better =
        bleu > best_bleu ||
        (bleu == best_bleu &&
         (cosine > best_cosine || (cosine == best_cosine && id < best_id)));
    if (better) {
      best_bleu = bleu;
      best_cosine = cosine;
      best_id = id;
    }
  }
  return entries_[static_cast<std::size_t>(best_id)].message;
}

}  // namespace coregen

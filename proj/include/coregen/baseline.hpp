#pragma once

#include "coregen/corpus.hpp"

#include <unordered_map>
#include <vector>

namespace coregen {

// Bag-of-words retrieval over training diffs: cosine top-k, then smoothed
// sentence BLEU-4 re-ranking, then message reuse.
class RetrievalIndex {
 public:
  RetrievalIndex(const std::vector<CommitRecord>& train, int k = 5);

  Tokens generate(const Tokens& query_diff) const;

  // cosine stage only: the k best training ids, ties to the lower id
  std::vector<int> top_k(const Tokens& query_diff) const;

  int size() const { return static_cast<int>(entries_.size()); }
  int k() const { return k_; }

  // raw count of `token` in the indexed diff, 0 when absent
  double term_frequency(int id, const std::string& token) const;

 private:
  struct Entry {
    std::vector<std::pair<int, double>> counts;  // (term id, frequency), sorted
    double norm = 0.0;
    Tokens diff;
    Tokens message;
  };

  std::vector<std::pair<double, int>> scored_top_k(const Tokens& query_diff) const;

  std::unordered_map<std::string, int> term_ids_;
  std::vector<Entry> entries_;
  int k_ = 5;
};

inline RetrievalIndex build_index(const std::vector<CommitRecord>& train, int k = 5) {
  return RetrievalIndex(train, k);
}

inline Tokens nngen_generate(const RetrievalIndex& index, const Tokens& query_diff) {
  return index.generate(query_diff);
}

}  // namespace coregen

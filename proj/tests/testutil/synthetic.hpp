#pragma once

// Deterministic synthetic commit corpora for tests: a learnable corpus whose
// message is a fixed function of the changed tokens, and a dedup corpus with
// hand-planted train/test overlaps.

#include "coregen/corpus.hpp"
#include "coregen/rng.hpp"

#include <string>

namespace synthetic {

struct Corpus {
  std::vector<coregen::CommitRecord> train;
  std::vector<coregen::CommitRecord> valid;
  std::vector<coregen::CommitRecord> test;
};

// n records split 80/10/10. Explicit-change commits carry one replaced token
// and the message "edit <old> to <new>"; implicit commits describe a binary
// file and the message "binary <file>". Vocabulary lands near 300 tokens.
Corpus make_learnable_corpus(int n, std::uint64_t seed);

// n records split 80/10/10 where every record carries a unique serial token,
// except `planted_diff` test records whose diff is copied from the training
// split; the first `planted_full` of those also copy the message.
Corpus make_dedup_corpus(int n, std::uint64_t seed, int planted_diff,
                         int planted_full);

// One record per line: "<split>.diff" / "<split>.msg" under dir.
void write_corpus(const Corpus& corpus, const std::string& dir);

}  // namespace synthetic

#pragma once

#include "coregen/corpus.hpp"

#include <string>
#include <vector>

namespace coregen {

// Scores are reported on a 0..100 scale. ROUGE is sentence-level F1 averaged
// over the corpus; METEOR uses exact unigram matching only (no stemming or
// synonym stages), which the report metadata records.
struct MetricReport {
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double meteor = 0.0;
  int sentences = 0;
  long long candidate_tokens = 0;
  long long reference_tokens = 0;

  std::string to_json() const;
};

using TokenCorpus = std::vector<Tokens>;

double corpus_bleu4(const TokenCorpus& candidates, const TokenCorpus& references);

// Single-pair BLEU-4 with add-one smoothing on the 2..4-gram precisions,
// used for retrieval re-ranking where exact zeros would tie everything.
double sentence_bleu4_smoothed(const Tokens& candidate, const Tokens& reference);

double rouge_n(const TokenCorpus& candidates, const TokenCorpus& references, int n);

double rouge_l(const TokenCorpus& candidates, const TokenCorpus& references);

double meteor(const TokenCorpus& candidates, const TokenCorpus& references);

struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};

// Maximum one-to-one exact unigram alignment; among maximum alignments the
// chunk count is minimized (branch-and-bound over per-token assignments).
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);

double meteor_sentence(const Tokens& candidate, const Tokens& reference);

MetricReport evaluate_corpus(const TokenCorpus& candidates,
                             const TokenCorpus& references);

MetricReport evaluate_corpus_files(const std::string& candidate_path,
                                   const std::string& reference_path);

TokenCorpus read_token_lines(const std::string& path);

}  // namespace coregen

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "coregen/metrics.hpp"
#include "coregen/rng.hpp"
#include "testutil/oracles.hpp"

#include <cmath>

using namespace coregen;

namespace {

Tokens toks(std::initializer_list<const char*> list) {
  Tokens out;
  for (const char* t : list) out.emplace_back(t);
  return out;
}

TokenCorpus random_corpus(Rng& rng, int sentences, int vocab, int max_len,
                          int min_len = 0) {
  TokenCorpus corpus;
  for (int s = 0; s < sentences; ++s) {
    const int len =
        min_len + static_cast<int>(rng.uniform_below(
                      static_cast<std::uint64_t>(max_len - min_len + 1)));
    Tokens sent;
    for (int t = 0; t < len; ++t) {
      sent.push_back("w" + std::to_string(rng.uniform_below(
                               static_cast<std::uint64_t>(vocab))));
    }
    corpus.push_back(std::move(sent));
  }
  return corpus;
}

}  // namespace

TEST_CASE("corpus BLEU-4 is 100 on identical corpora") {
  TokenCorpus refs = {toks({"fix", "null", "check", "in", "parser"}),
                      toks({"add", "unit", "tests", "for", "decoder"})};
  CHECK(corpus_bleu4(refs, refs) == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("corpus BLEU-4 matches the worked example") {
  TokenCorpus cand = {toks({"a", "b", "c", "d", "e"})};
  TokenCorpus ref = {toks({"a", "b", "c", "d", "f"})};
  CHECK(corpus_bleu4(cand, ref) ==
        doctest::Approx(66.874030497642202).epsilon(1e-12));
}

TEST_CASE("corpus BLEU-4 applies the brevity penalty") {
  TokenCorpus ref = {toks({"a", "b", "c", "d", "e", "f", "g", "h"})};
  TokenCorpus cand = {toks({"a", "b", "c", "d"})};
  // all n-gram precisions are 1, so the score is 100 * exp(1 - 8/4)
  CHECK(corpus_bleu4(cand, ref) ==
        doctest::Approx(36.787944117144232).epsilon(1e-12));
}

TEST_CASE("corpus BLEU-4 is zero when any n-gram order is unmatched") {
  TokenCorpus cand = {toks({"a", "b", "c", "d"})};
  TokenCorpus ref = {toks({"a", "c", "b", "d"})};  // no common bigram
  CHECK(corpus_bleu4(cand, ref) == 0.0);
}

TEST_CASE("corpus BLEU-4 validates input alignment") {
  TokenCorpus one = {toks({"a"})};
  TokenCorpus two = {toks({"a"}), toks({"b"})};
  try {
    corpus_bleu4(one, two);
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::LengthMismatch);
  }
  try {
    corpus_bleu4({}, {});
    FAIL("expected EmptyCorpus");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyCorpus);
  }
}

TEST_CASE("smoothed sentence BLEU handles short sentences") {
  CHECK(sentence_bleu4_smoothed(toks({"x"}), toks({"x"})) ==
        doctest::Approx(100.0).epsilon(1e-12));
  CHECK(sentence_bleu4_smoothed(toks({"a", "b"}), toks({"c", "d"})) == 0.0);
  // smoothing is inactive when every precision is exact
  TokenCorpus pair = {toks({"merge", "branch", "dev", "again"})};
  CHECK(sentence_bleu4_smoothed(pair[0], pair[0]) ==
        doctest::Approx(corpus_bleu4(pair, pair)).epsilon(1e-12));
  try {
    sentence_bleu4_smoothed({}, toks({"a"}));
    FAIL("expected EmptyInput");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyInput);
  }
}

TEST_CASE("ROUGE-1 sees bag equality, ROUGE-2 sees order") {
  TokenCorpus cand = {toks({"a", "b", "c", "d"})};
  TokenCorpus ref = {toks({"a", "c", "b", "d"})};
  CHECK(rouge_n(cand, ref, 1) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(rouge_n(cand, ref, 2) == 0.0);
  CHECK(rouge_n(cand, cand, 2) == doctest::Approx(100.0).epsilon(1e-12));
}

TEST_CASE("ROUGE-L matches the hand-computed LCS example") {
  TokenCorpus cand = {toks({"a", "b", "c", "d"})};
  TokenCorpus ref = {toks({"a", "c", "b", "d"})};
  CHECK(rouge_l(cand, ref) == doctest::Approx(75.0).epsilon(1e-12));
  CHECK(rouge_l(cand, cand) == doctest::Approx(100.0).epsilon(1e-12));
  TokenCorpus other = {toks({"x", "y"})};
  CHECK(rouge_l(cand, other) == 0.0);
}

TEST_CASE("METEOR matches the hand-computed examples") {
  TokenCorpus same = {toks({"the", "cat"})};
  CHECK(meteor(same, same) == doctest::Approx(93.75).epsilon(1e-12));

  TokenCorpus swapped = {toks({"b", "a"})};
  TokenCorpus ordered = {toks({"a", "b"})};
  CHECK(meteor(swapped, ordered) == doctest::Approx(50.0).epsilon(1e-12));

  TokenCorpus disjoint = {toks({"x", "y"})};
  CHECK(meteor(disjoint, ordered) == 0.0);
}

TEST_CASE("METEOR alignment minimizes chunks among maximum matchings") {
  // "a b a" vs "a b a": the straight diagonal gives one chunk
  const auto align = meteor_align(toks({"a", "b", "a"}), toks({"a", "b", "a"}));
  CHECK(align.matches == 3);
  CHECK(align.chunks == 1);

  // crossing pair needs two chunks despite full matching
  const auto crossed = meteor_align(toks({"b", "a"}), toks({"a", "b"}));
  CHECK(crossed.matches == 2);
  CHECK(crossed.chunks == 2);

  // duplicate tokens: picking the second "a" yields one contiguous run,
  // where a first-occurrence greedy aligner would report two or three chunks
  const auto dup = meteor_align(toks({"x", "a", "b"}), toks({"a", "x", "a", "b"}));
  CHECK(dup.matches == 3);
  CHECK(dup.chunks == 1);
}

TEST_CASE("every metric agrees with the brute-force oracle on random pairs") {
  Rng rng(90210);
  for (int trial = 0; trial < 400; ++trial) {
    TokenCorpus cands = random_corpus(rng, 3, 20, 12);
    TokenCorpus refs = random_corpus(rng, 3, 20, 12, 1);
    CHECK(std::abs(corpus_bleu4(cands, refs) - oracle::bleu4_corpus(cands, refs)) <
          1e-9);
    CHECK(std::abs(rouge_n(cands, refs, 1) - oracle::rouge_n(cands, refs, 1)) < 1e-9);
    CHECK(std::abs(rouge_n(cands, refs, 2) - oracle::rouge_n(cands, refs, 2)) < 1e-9);
    CHECK(std::abs(rouge_l(cands, refs) - oracle::rouge_l(cands, refs)) < 1e-9);
    CHECK(std::abs(meteor(cands, refs) - oracle::meteor(cands, refs)) < 1e-9);
    if (!cands[0].empty()) {
      CHECK(std::abs(sentence_bleu4_smoothed(cands[0], refs[0]) -
                     oracle::bleu4_sentence_smoothed(cands[0], refs[0])) < 1e-9);
    }
    // ROUGE-1 dominates ROUGE-2, and everything stays in range
    CHECK(rouge_n(cands, refs, 1) >= rouge_n(cands, refs, 2) - 1e-12);
    for (double score : {corpus_bleu4(cands, refs), rouge_l(cands, refs),
                         meteor(cands, refs)}) {
      CHECK(score >= 0.0);
      CHECK(score <= 100.0 + 1e-9);
    }
  }
}

TEST_CASE("corpus scores are invariant under pair reordering") {
  Rng rng(777);
  TokenCorpus cands = random_corpus(rng, 8, 15, 10, 1);
  TokenCorpus refs = random_corpus(rng, 8, 15, 10, 1);
  TokenCorpus cands_rev(cands.rbegin(), cands.rend());
  TokenCorpus refs_rev(refs.rbegin(), refs.rend());
  CHECK(corpus_bleu4(cands, refs) ==
        doctest::Approx(corpus_bleu4(cands_rev, refs_rev)).epsilon(1e-12));
  CHECK(rouge_l(cands, refs) ==
        doctest::Approx(rouge_l(cands_rev, refs_rev)).epsilon(1e-12));
  CHECK(meteor(cands, refs) ==
        doctest::Approx(meteor(cands_rev, refs_rev)).epsilon(1e-12));
}

TEST_CASE("evaluate_corpus aggregates all metrics and tolerates empty candidates") {
  TokenCorpus refs = {toks({"update", "build", "script", "now"}),
                      toks({"remove", "dead", "code", "path"})};
  const MetricReport self_report = evaluate_corpus(refs, refs);
  CHECK(self_report.bleu4 == doctest::Approx(100.0));
  CHECK(self_report.rouge1 == doctest::Approx(100.0));
  CHECK(self_report.rougeL == doctest::Approx(100.0));
  CHECK(self_report.meteor == doctest::Approx(oracle::meteor(refs, refs)));
  CHECK(self_report.sentences == 2);
  CHECK(self_report.candidate_tokens == 8);

  TokenCorpus with_empty = {Tokens{}, refs[1]};
  const MetricReport report = evaluate_corpus(with_empty, refs);
  CHECK(report.rouge1 == doctest::Approx(50.0));  // empty line scores zero
  CHECK(report.meteor ==
        doctest::Approx(oracle::meteor(with_empty, refs)).epsilon(1e-9));
  CHECK(report.to_json() == evaluate_corpus(with_empty, refs).to_json());
}

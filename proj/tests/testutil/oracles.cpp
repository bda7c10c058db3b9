#include "testutil/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace oracle {

namespace {

std::map<Tokens, int> ngram_bag(const Tokens& tokens, int n) {
  std::map<Tokens, int> bag;
  for (int i = 0; i + n <= static_cast<int>(tokens.size()); ++i) {
    Tokens gram(tokens.begin() + i, tokens.begin() + i + n);
    ++bag[gram];
  }
  return bag;
}

long long bag_overlap(const std::map<Tokens, int>& a, const std::map<Tokens, int>& b) {
  long long total = 0;
  for (const auto& [gram, count] : a) {
    auto it = b.find(gram);
    if (it != b.end()) total += std::min(count, it->second);
  }
  return total;
}

}  // namespace

double bleu4_corpus(const TokenCorpus& candidates, const TokenCorpus& references) {
  long long matched[5] = {0}, possible[5] = {0};
  long long cand_total = 0, ref_total = 0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_total += static_cast<long long>(candidates[s].size());
    ref_total += static_cast<long long>(references[s].size());
    for (int n = 1; n <= 4; ++n) {
      auto cbag = ngram_bag(candidates[s], n);
      auto rbag = ngram_bag(references[s], n);
      matched[n] += bag_overlap(cbag, rbag);
      for (const auto& [gram, count] : cbag) possible[n] += count;
    }
  }
  if (cand_total == 0) return 0.0;
  double geo = 1.0;
  for (int n = 1; n <= 4; ++n) {
    if (matched[n] == 0) return 0.0;
    geo *= static_cast<double>(matched[n]) / static_cast<double>(possible[n]);
  }
  geo = std::pow(geo, 0.25);
  double bp = 1.0;
  if (cand_total < ref_total) {
    bp = std::exp(1.0 - static_cast<double>(ref_total) / static_cast<double>(cand_total));
  }
  return 100.0 * bp * geo;
}

double bleu4_sentence_smoothed(const Tokens& candidate, const Tokens& reference) {
  double geo = 1.0;
  for (int n = 1; n <= 4; ++n) {
    auto cbag = ngram_bag(candidate, n);
    auto rbag = ngram_bag(reference, n);
    long long matched = bag_overlap(cbag, rbag);
    long long possible = 0;
    for (const auto& [gram, count] : cbag) possible += count;
    if (n >= 2) {
      ++matched;
      ++possible;
    }
    if (matched == 0 || possible == 0) return 0.0;
    geo *= static_cast<double>(matched) / static_cast<double>(possible);
  }
  geo = std::pow(geo, 0.25);
  double bp = 1.0;
  if (candidate.size() < reference.size()) {
    bp = std::exp(1.0 - static_cast<double>(reference.size()) /
                            static_cast<double>(candidate.size()));
  }
  return 100.0 * bp * geo;
}

double rouge_n(const TokenCorpus& candidates, const TokenCorpus& references, int n) {
  double sum = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    auto cbag = ngram_bag(candidates[s], n);
    auto rbag = ngram_bag(references[s], n);
    long long cand_count = 0, ref_count = 0;
    for (const auto& [gram, count] : cbag) cand_count += count;
    for (const auto& [gram, count] : rbag) ref_count += count;
    if (cand_count == 0 || ref_count == 0) continue;
    const double overlap = static_cast<double>(bag_overlap(cbag, rbag));
    const double p = overlap / static_cast<double>(cand_count);
    const double r = overlap / static_cast<double>(ref_count);
    if (p + r > 0.0) sum += 2.0 * p * r / (p + r);
  }
  return 100.0 * sum / static_cast<double>(candidates.size());
}

namespace {

int lcs_recursive(const Tokens& a, const Tokens& b, std::size_t i, std::size_t j,
                  std::map<std::pair<std::size_t, std::size_t>, int>& memo) {
  if (i == a.size() || j == b.size()) return 0;
  auto key = std::make_pair(i, j);
  auto it = memo.find(key);
  if (it != memo.end()) return it->second;
  int result;
  if (a[i] == b[j]) {
    result = 1 + lcs_recursive(a, b, i + 1, j + 1, memo);
  } else {
    result = std::max(lcs_recursive(a, b, i + 1, j, memo),
                      lcs_recursive(a, b, i, j + 1, memo));
  }
  memo[key] = result;
  return result;
}

}  // namespace

double rouge_l(const TokenCorpus& candidates, const TokenCorpus& references) {
  double sum = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const Tokens& cand = candidates[s];
    const Tokens& ref = references[s];
    if (cand.empty() || ref.empty()) continue;
    std::map<std::pair<std::size_t, std::size_t>, int> memo;
    const double lcs = lcs_recursive(cand, ref, 0, 0, memo);
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    if (p + r > 0.0) sum += 2.0 * p * r / (p + r);
  }
  return 100.0 * sum / static_cast<double>(candidates.size());
}

Alignment meteor_alignment(const Tokens& candidate, const Tokens& reference) {
  Alignment best;  // ordered by (max matches, min chunks)
  std::vector<int> ref_of(candidate.size(), -1);
  std::vector<bool> used(reference.size(), false);

  std::function<void(std::size_t)> recurse = [&](std::size_t i) {
    if (i == candidate.size()) {
      int matches = 0, chunks = 0;
      for (std::size_t c = 0; c < candidate.size(); ++c) {
        if (ref_of[c] < 0) continue;
        ++matches;
        const bool continues =
            c > 0 && ref_of[c - 1] >= 0 && ref_of[c] == ref_of[c - 1] + 1;
        if (!continues) ++chunks;
      }
      if (matches > best.matches ||
          (matches == best.matches && chunks < best.chunks)) {
        best.matches = matches;
        best.chunks = chunks;
      }
      return;
    }
    recurse(i + 1);  // leave candidate position i unmatched
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (!used[j] && reference[j] == candidate[i]) {
        used[j] = true;
        ref_of[i] = static_cast<int>(j);
        recurse(i + 1);
        ref_of[i] = -1;
        used[j] = false;
      }
    }
  };
  best.chunks = static_cast<int>(candidate.size()) + 1;
  recurse(0);
  if (best.matches == 0) best.chunks = 0;
  return best;
}

double meteor(const TokenCorpus& candidates, const TokenCorpus& references) {
  double sum = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    const Tokens& cand = candidates[s];
    const Tokens& ref = references[s];
    if (cand.empty() || ref.empty()) continue;
    const Alignment a = meteor_alignment(cand, ref);
    if (a.matches == 0) continue;
    const double m = a.matches;
    const double p = m / static_cast<double>(cand.size());
    const double r = m / static_cast<double>(ref.size());
    const double f = p * r / (0.9 * p + 0.1 * r);
    const double penalty = 0.5 * std::pow(a.chunks / m, 3.0);
    sum += f * (1.0 - penalty);
  }
  return 100.0 * sum / static_cast<double>(candidates.size());
}

long long parameter_count(int d_model, int n_layers, int d_ff, int vocab_size,
                          bool tie_output) {
  const long long d = d_model;
  const long long ff = d_ff;
  const long long v = vocab_size;
  const long long attention = 4 * (d * d + d);
  const long long layer_norm = 2 * d;
  const long long ffn = d * ff + ff + ff * d + d;
  const long long encoder_layer = attention + layer_norm + ffn + layer_norm;
  const long long decoder_layer = 2 * attention + 3 * layer_norm + ffn;
  long long total = v * d;  // shared embedding
  total += n_layers * (encoder_layer + decoder_layer);
  if (!tie_output) total += d * v;
  total += v;  // output bias
  return total;
}

}  // namespace oracle

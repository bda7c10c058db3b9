#include "coregen/corpus.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace coregen {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::LineCountMismatch: return "LineCountMismatch";
    case ErrorCode::EmptyLine: return "EmptyLine";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::UnknownId: return "UnknownId";
    case ErrorCode::WrongCategory: return "WrongCategory";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::AllPadded: return "AllPadded";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::WrongStageTag: return "WrongStageTag";
    case ErrorCode::NoLabels: return "NoLabels";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyQuery: return "EmptyQuery";
    case ErrorCode::NumericFailure: return "NumericFailure";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

const char* split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

const char* dedup_filter_mode_name(DedupFilterMode mode) {
  return mode == DedupFilterMode::DropIdenticalCode ? "drop_identical_code"
                                                    : "drop_completely_identical";
}

Tokens split_whitespace(const std::string& line) {
  Tokens tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::vector<CommitRecord> load_split(const std::string& diff_path,
                                     const std::string& msg_path, Split split) {
  const auto diff_lines = read_lines(diff_path);
  const auto msg_lines = read_lines(msg_path);
  if (diff_lines.size() != msg_lines.size()) {
    std::ostringstream os;
    os << "line count mismatch: diff=" << diff_lines.size()
       << " msg=" << msg_lines.size();
    throw Error(ErrorCode::LineCountMismatch, os.str());
  }
  std::vector<CommitRecord> records;
  records.reserve(diff_lines.size());
  for (std::size_t i = 0; i < diff_lines.size(); ++i) {
    CommitRecord rec;
    rec.id = static_cast<int>(i);
    rec.split = split;
    rec.diff_tokens = split_whitespace(diff_lines[i]);
    rec.msg_tokens = split_whitespace(msg_lines[i]);
    if (rec.diff_tokens.empty()) {
      throw Error(ErrorCode::EmptyLine,
                  "empty diff line at index " + std::to_string(i));
    }
    if (rec.msg_tokens.empty()) {
      throw Error(ErrorCode::EmptyLine,
                  "empty msg line at index " + std::to_string(i));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<CommitRecord> load_diff_file(const std::string& diff_path,
                                         Split split) {
  const auto diff_lines = read_lines(diff_path);
  std::vector<CommitRecord> records;
  records.reserve(diff_lines.size());
  for (std::size_t i = 0; i < diff_lines.size(); ++i) {
    CommitRecord rec;
    rec.id = static_cast<int>(i);
    rec.split = split;
    rec.diff_tokens = split_whitespace(diff_lines[i]);
    if (rec.diff_tokens.empty()) {
      throw Error(ErrorCode::EmptyLine,
                  "empty diff line at index " + std::to_string(i));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

TokenizedCommit structure_commit(const CommitRecord& record) {
  TokenizedCommit out;
  out.record = record;

  DiffLine current;
  bool at_line_start = true;
  out.line_offsets.push_back(0);
  for (std::size_t i = 0; i < record.diff_tokens.size(); ++i) {
    const std::string& tok = record.diff_tokens[i];
    if (tok == kNewlineToken) {
      out.lines.push_back(std::move(current));
      current = DiffLine{};
      at_line_start = true;
      out.line_offsets.push_back(static_cast<int>(i) + 1);
      continue;
    }
    if (at_line_start) {
      at_line_start = false;
      if (tok == "+") {
        current.marker = LineMarker::Added;
        out.line_offsets.back() = static_cast<int>(i) + 1;
        continue;
      }
      if (tok == "-") {
        current.marker = LineMarker::Removed;
        out.line_offsets.back() = static_cast<int>(i) + 1;
        continue;
      }
      current.marker = LineMarker::Context;
    }
    current.tokens.push_back(tok);
  }
  out.lines.push_back(std::move(current));

  for (const DiffLine& line : out.lines) {
    if (line.marker != LineMarker::Added) {
      out.before_tokens.insert(out.before_tokens.end(), line.tokens.begin(),
                               line.tokens.end());
    }
    if (line.marker != LineMarker::Removed) {
      out.after_tokens.insert(out.after_tokens.end(), line.tokens.begin(),
                              line.tokens.end());
    }
  }
  out.category = (out.before_tokens != out.after_tokens)
                     ? ChangeCategory::ExplicitChange
                     : ChangeCategory::ImplicitChange;
  return out;
}

Vocabulary::Vocabulary() {
  id_to_token_ = {kPadToken, kBosToken, kEosToken, kUnkToken, kMaskToken};
  for (int i = 0; i < kNumSentinels; ++i) token_to_id_[id_to_token_[i]] = i;
}

TokenId Vocabulary::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  TokenId id = static_cast<TokenId>(id_to_token_.size());
  token_to_id_[token] = id;
  id_to_token_.push_back(token);
  if (token == kNewlineToken) nl_id_ = id;
  return id;
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

TokenId Vocabulary::encode_token(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

std::vector<TokenId> Vocabulary::encode(const Tokens& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(encode_token(t));
  return ids;
}

const std::string& Vocabulary::decode_token(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw Error(ErrorCode::UnknownId, "id " + std::to_string(id) +
                                          " outside vocabulary of size " +
                                          std::to_string(size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

Tokens Vocabulary::decode(const std::vector<TokenId>& ids) const {
  Tokens tokens;
  tokens.reserve(ids.size());
  for (TokenId id : ids) tokens.push_back(decode_token(id));
  return tokens;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << "#coregen-vocab v1\n";
  for (int id = kNumSentinels; id < size(); ++id) {
    out << id_to_token_[static_cast<std::size_t>(id)] << "\n";
  }
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "#coregen-vocab v1") {
    throw Error(ErrorCode::VersionMismatch, "bad vocabulary header in " + path);
  }
  Vocabulary vocab;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    vocab.add(lines[i]);
  }
  return vocab;
}

Vocabulary build_vocabulary(const std::vector<CommitRecord>& records,
                            int min_freq, int max_size) {
  if (records.empty()) throw Error(ErrorCode::EmptyCorpus, "no training records");
  if (min_freq < 1) throw Error(ErrorCode::InvalidConfig, "min_freq must be >= 1");

  struct Entry {
    long long freq = 0;
    long long first_seen = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  long long order = 0;
  auto tally = [&](const Tokens& tokens) {
    for (const auto& tok : tokens) {
      auto [it, inserted] = counts.try_emplace(tok);
      if (inserted) it->second.first_seen = order;
      ++order;
      ++it->second.freq;
    }
  };
  for (const auto& rec : records) {
    tally(rec.diff_tokens);
    tally(rec.msg_tokens);
  }
  // Sentinel strings never become regular entries.
  for (const char* s : {kPadToken, kBosToken, kEosToken, kUnkToken, kMaskToken})
    counts.erase(s);

  std::vector<std::pair<std::string, Entry>> ordered(counts.begin(), counts.end());
  std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    if (a.second.freq != b.second.freq) return a.second.freq > b.second.freq;
    return a.second.first_seen < b.second.first_seen;
  });

  Vocabulary vocab;
  const int cap = max_size > 0 ? max_size : std::numeric_limits<int>::max();
  for (const auto& [tok, entry] : ordered) {
    const bool structural = tok == kNewlineToken;  // never cut off
    if (!structural && entry.freq < min_freq) continue;
    if (!structural && vocab.size() >= cap) continue;
    vocab.add(tok);
  }
  return vocab;
}

double percent_2dp(long long count, long long total) {
  if (total == 0) return 0.0;
  // half-up rounding of 100*count/total at 2 decimals, in integer arithmetic
  const long long hundredths = (20000 * count + total) / (2 * total);
  return static_cast<double>(hundredths) / 100.0;
}

namespace {

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    out += t;
    out += ' ';
  }
  return out;
}

DedupSplitReport analyze_split(const std::unordered_set<std::string>& train_diffs,
                               const std::unordered_set<std::string>& train_pairs,
                               const std::vector<CommitRecord>& records) {
  DedupSplitReport rep;
  rep.total = static_cast<int>(records.size());
  for (const auto& rec : records) {
    const std::string diff_key = join_tokens(rec.diff_tokens);
    if (train_diffs.count(diff_key)) {
      rep.identical_code_ids.push_back(rec.id);
      if (train_pairs.count(diff_key + "\x1f" + join_tokens(rec.msg_tokens))) {
        rep.completely_identical_ids.push_back(rec.id);
      }
    }
  }
  rep.identical_code_changes = static_cast<int>(rep.identical_code_ids.size());
  rep.completely_identical = static_cast<int>(rep.completely_identical_ids.size());
  rep.identical_code_changes_pct = percent_2dp(rep.identical_code_changes, rep.total);
  rep.completely_identical_pct = percent_2dp(rep.completely_identical, rep.total);
  return rep;
}

}  // namespace

DedupReport dedup_analyze(const std::vector<CommitRecord>& train,
                          const std::vector<CommitRecord>& valid,
                          const std::vector<CommitRecord>& test) {
  std::unordered_set<std::string> train_diffs;
  std::unordered_set<std::string> train_pairs;
  train_diffs.reserve(train.size() * 2);
  train_pairs.reserve(train.size() * 2);
  for (const auto& rec : train) {
    const std::string diff_key = join_tokens(rec.diff_tokens);
    train_pairs.insert(diff_key + "\x1f" + join_tokens(rec.msg_tokens));
    train_diffs.insert(std::move(diff_key));
  }
  DedupReport report;
  report.valid = analyze_split(train_diffs, train_pairs, valid);
  report.test = analyze_split(train_diffs, train_pairs, test);
  return report;
}

std::string DedupReport::to_json() const {
  auto split_json = [](const DedupSplitReport& rep) {
    nlohmann::ordered_json j;
    j["total"] = rep.total;
    j["identical_code_changes"] = {{"count", rep.identical_code_changes},
                                   {"percentage", rep.identical_code_changes_pct}};
    j["completely_identical"] = {{"count", rep.completely_identical},
                                 {"percentage", rep.completely_identical_pct}};
    j["offending_ids"] = {{"identical_code_changes", rep.identical_code_ids},
                          {"completely_identical", rep.completely_identical_ids}};
    return j;
  };
  nlohmann::ordered_json j;
  j["valid"] = split_json(valid);
  j["test"] = split_json(test);
  return j.dump(2);
}

FilteredSplits dedup_filter(const std::vector<CommitRecord>& train,
                            const std::vector<CommitRecord>& valid,
                            const std::vector<CommitRecord>& test,
                            DedupFilterMode mode) {
  const DedupReport report = dedup_analyze(train, valid, test);
  auto apply = [&](const std::vector<CommitRecord>& records,
                   const DedupSplitReport& rep) {
    const std::vector<int>& drop_ids =
        mode == DedupFilterMode::DropIdenticalCode ? rep.identical_code_ids
                                                   : rep.completely_identical_ids;
    std::unordered_set<int> drop(drop_ids.begin(), drop_ids.end());
    std::vector<CommitRecord> kept;
    kept.reserve(records.size());
    for (const auto& rec : records) {
      if (!drop.count(rec.id)) kept.push_back(rec);
    }
    return kept;
  };
  FilteredSplits out;
  out.valid = apply(valid, report.valid);
  out.test = apply(test, report.test);
  return out;
}

}  // namespace coregen

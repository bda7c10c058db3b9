#pragma once

#include "coregen/common.hpp"

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace coregen {

using Tokens = std::vector<std::string>;

enum class Split { Train, Valid, Test };

const char* split_name(Split split);

// One line of a parallel .diff/.msg file pair. diff_tokens is the raw commit
// sequence including "+"/"-" markers and "<nl>" separators.
struct CommitRecord {
  int id = 0;
  Tokens diff_tokens;
  Tokens msg_tokens;
  Split split = Split::Train;
};

enum class LineMarker { Added, Removed, Context };

struct DiffLine {
  LineMarker marker = LineMarker::Context;
  Tokens tokens;  // marker token and "<nl>" separator excluded
};

enum class ChangeCategory { ExplicitChange, ImplicitChange };

struct TokenizedCommit {
  CommitRecord record;
  std::vector<DiffLine> lines;
  Tokens before_tokens;  // tokens of Removed + Context lines, in order
  Tokens after_tokens;   // tokens of Added + Context lines, in order
  ChangeCategory category = ChangeCategory::ImplicitChange;

  // global index into record.diff_tokens of each line's first content token
  std::vector<int> line_offsets;
};

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr TokenId kMaskId = 4;
inline constexpr int kNumSentinels = 5;

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<s>";
inline constexpr const char* kEosToken = "</s>";
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kMaskToken = "<mask>";
inline constexpr const char* kNewlineToken = "<nl>";

// Shared vocabulary over code and message tokens. Ids are dense in [0, V)
// with the five sentinels pinned at ids 0..4.
class Vocabulary {
 public:
  Vocabulary();

  // id of a regular token appended in order; sentinels are pre-registered
  TokenId add(const std::string& token);

  TokenId encode_token(const std::string& token) const;
  std::vector<TokenId> encode(const Tokens& tokens) const;
  const std::string& decode_token(TokenId id) const;  // throws UnknownId
  Tokens decode(const std::vector<TokenId>& ids) const;

  int size() const { return static_cast<int>(id_to_token_.size()); }
  TokenId nl_id() const { return nl_id_; }
  bool contains(const std::string& token) const;

  const std::vector<std::string>& tokens() const { return id_to_token_; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  TokenId nl_id_ = -1;
};

struct DedupSplitReport {
  int total = 0;
  int identical_code_changes = 0;
  int completely_identical = 0;
  double identical_code_changes_pct = 0.0;  // half-up, 2 decimals
  double completely_identical_pct = 0.0;
  std::vector<int> identical_code_ids;
  std::vector<int> completely_identical_ids;
};

struct DedupReport {
  DedupSplitReport valid;
  DedupSplitReport test;

  std::string to_json() const;
};

enum class DedupFilterMode { DropIdenticalCode, DropCompletelyIdentical };

const char* dedup_filter_mode_name(DedupFilterMode mode);

// 100*count/total rounded half-up to 2 decimals.
double percent_2dp(long long count, long long total);

std::vector<CommitRecord> load_split(const std::string& diff_path,
                                     const std::string& msg_path, Split split);

// Diff-only loading for unlabeled queries; msg_tokens stay empty.
std::vector<CommitRecord> load_diff_file(const std::string& diff_path,
                                         Split split);

Tokens split_whitespace(const std::string& line);

TokenizedCommit structure_commit(const CommitRecord& record);

Vocabulary build_vocabulary(const std::vector<CommitRecord>& records,
                            int min_freq = 1, int max_size = 0);

DedupReport dedup_analyze(const std::vector<CommitRecord>& train,
                          const std::vector<CommitRecord>& valid,
                          const std::vector<CommitRecord>& test);

struct FilteredSplits {
  std::vector<CommitRecord> valid;
  std::vector<CommitRecord> test;
};

FilteredSplits dedup_filter(const std::vector<CommitRecord>& train,
                            const std::vector<CommitRecord>& valid,
                            const std::vector<CommitRecord>& test,
                            DedupFilterMode mode);

}  // namespace coregen

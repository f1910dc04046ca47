#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace decaypo {

class PolicyModel;

/// Malformed input line; carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed record that violates a PreferencePair invariant.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::size_t line, std::string id, const std::string& what);
  std::size_t line() const { return line_; }
  const std::string& id() const { return id_; }

 private:
  std::size_t line_;
  std::string id_;
};

class UnknownPromptError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct PreferencePair {
  std::string id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();

  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
  bool operator==(const PreferencePair&) const = default;
};

// JSONL pair files: one object per line with keys id, prompt, chosen,
// rejected, meta in that order. Byte strings that are not valid UTF-8 (or
// that begin with the escape prefix itself) are written as "b64:" + base64.
std::vector<PreferencePair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path);
std::string pairs_to_jsonl(const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> pairs_from_jsonl(std::string_view text);

std::string encode_byte_string(std::string_view bytes);
std::string decode_byte_string(std::string_view text);
bool is_valid_utf8(std::string_view s);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// Writes through a temporary file in the same directory and renames it into
/// place. Throws std::runtime_error naming the path on failure.
void atomic_write(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic task

struct CorpusEntry {
  std::string prompt;
  std::string target;
  bool operator==(const CorpusEntry&) const = default;
};

/// Prompt -> target lookup. Prompts are "<letter><n>:" and the target is the
/// n letters of the alphabet starting at <letter>, wrapping after 'z'.
class TaskCorpus {
 public:
  TaskCorpus() = default;
  explicit TaskCorpus(std::vector<CorpusEntry> entries);

  static TaskCorpus synthetic(std::size_t prompts, int min_len, int max_len, std::uint64_t seed);
  static TaskCorpus load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const std::vector<CorpusEntry>& entries() const { return entries_; }
  std::vector<std::string> prompts() const;
  std::size_t size() const { return entries_.size(); }
  /// Throws UnknownPromptError.
  const std::string& target(std::string_view prompt) const;

 private:
  std::vector<CorpusEntry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

std::size_t edit_distance(std::string_view a, std::string_view b);

enum class OracleKind { TargetMatch, LengthPenalizedMatch };

struct RewardOracle {
  OracleKind kind = OracleKind::TargetMatch;
  std::shared_ptr<const TaskCorpus> corpus;
  /// Per-byte penalty for LengthPenalizedMatch; negative values reward length.
  double brevity_coefficient = 0.0;
};

/// -edit_distance(response, target) [- brevity_coefficient * |response|].
double oracle_score(const RewardOracle& oracle, std::string_view prompt, std::string_view response);

struct OnPolicyOptions {
  int k = 5;
  double temperature = 0.8;
  int max_len = 256;
  std::uint64_t seed = 0;
};

struct OnPolicyResult {
  std::vector<PreferencePair> pairs;
  std::size_t skipped_ties = 0;
};

/// For each prompt: K samples, chosen = best oracle score, rejected = worst,
/// ties to the earlier sample; prompts whose samples all score the same are
/// skipped. Prompt i samples from its own generator seeded by (seed, i).
OnPolicyResult build_onpolicy_pairs(const PolicyModel& model, const RewardOracle& oracle,
                                    const std::vector<std::string>& prompts,
                                    const OnPolicyOptions& opts);

}  // namespace decaypo

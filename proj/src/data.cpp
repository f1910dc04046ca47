#include "decaypo/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <system_error>

#include "decaypo/policy_model.hpp"
#include "decaypo/rng.hpp"

namespace decaypo {

using ojson = nlohmann::ordered_json;

ParseError::ParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

ValidationError::ValidationError(std::size_t line, std::string id, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + " (id '" + id + "'): " + what),
      line_(line),
      id_(std::move(id)) {}

void PreferencePair::validate() const {
  if (prompt.empty()) throw std::invalid_argument("prompt is empty");
  if (chosen == rejected) throw std::invalid_argument("chosen and rejected responses are identical");
  if (!meta.is_object()) throw std::invalid_argument("meta is not an object");
}

// ---------------------------------------------------------------------------
// Byte strings

namespace {

constexpr std::string_view kB64Prefix = "b64:";
constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
        (cp >= 0xD800 && cp <= 0xDFFF) || cp > 0x10FFFF) {
      return false;
    }
    i += extra + 1;
  }
  return true;
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                            static_cast<unsigned char>(bytes[i + 2]);
    out += kB64Alphabet[(v >> 18) & 63];
    out += kB64Alphabet[(v >> 12) & 63];
    out += kB64Alphabet[(v >> 6) & 63];
    out += kB64Alphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest > 0) {
    std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    if (rest == 2) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kB64Alphabet[(v >> 18) & 63];
    out += kB64Alphabet[(v >> 12) & 63];
    out += rest == 2 ? kB64Alphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64Alphabet[i])] = i;
  if (text.size() % 4 != 0) throw std::invalid_argument("base64: length is not a multiple of 4");
  std::string out;
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = lut[static_cast<unsigned char>(c)];
      if (d < 0 || pad > 0) throw std::invalid_argument("base64: invalid character");
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out += static_cast<char>((v >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((v >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(v & 0xFF);
  }
  return out;
}

std::string encode_byte_string(std::string_view bytes) {
  if (is_valid_utf8(bytes) && !bytes.starts_with(kB64Prefix)) return std::string(bytes);
  return std::string(kB64Prefix) + base64_encode(bytes);
}

std::string decode_byte_string(std::string_view text) {
  if (text.starts_with(kB64Prefix)) return base64_decode(text.substr(kB64Prefix.size()));
  return std::string(text);
}

// ---------------------------------------------------------------------------
// Files

void atomic_write(const std::filesystem::path& path, std::string_view contents) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw std::runtime_error("cannot move output into place at " + path.string());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// JSONL pairs

std::string pairs_to_jsonl(const std::vector<PreferencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    ojson j;
    j["id"] = p.id;
    j["prompt"] = encode_byte_string(p.prompt);
    j["chosen"] = encode_byte_string(p.chosen);
    j["rejected"] = encode_byte_string(p.rejected);
    j["meta"] = p.meta;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<PreferencePair> pairs_from_jsonl(std::string_view text) {
  std::vector<PreferencePair> pairs;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
    auto field = [&](const char* key) -> std::string {
      auto it = j.find(key);
      if (it == j.end() || !it->is_string()) {
        throw ParseError(line_no, std::string("missing or non-string key '") + key + "'");
      }
      return it->get<std::string>();
    };
    PreferencePair p;
    p.id = field("id");
    try {
      p.prompt = decode_byte_string(field("prompt"));
      p.chosen = decode_byte_string(field("chosen"));
      p.rejected = decode_byte_string(field("rejected"));
    } catch (const std::invalid_argument& e) {
      throw ParseError(line_no, e.what());
    }
    if (auto it = j.find("meta"); it != j.end()) {
      if (!it->is_object()) throw ParseError(line_no, "'meta' is not an object");
      p.meta = *it;
    }
    for (const auto& [key, _] : j.items()) {
      if (key != "id" && key != "prompt" && key != "chosen" && key != "rejected" && key != "meta") {
        throw ParseError(line_no, "unknown key '" + key + "'");
      }
    }
    try {
      p.validate();
    } catch (const std::invalid_argument& e) {
      throw ValidationError(line_no, p.id, e.what());
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
  return pairs_from_jsonl(read_file(path));
}

void save_pairs(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path) {
  atomic_write(path, pairs_to_jsonl(pairs));
}

// ---------------------------------------------------------------------------
// Task corpus and oracle

TaskCorpus::TaskCorpus(std::vector<CorpusEntry> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].prompt.empty()) throw std::invalid_argument("corpus entry with empty prompt");
    if (!index_.emplace(entries_[i].prompt, i).second) {
      throw std::invalid_argument("duplicate corpus prompt '" + entries_[i].prompt + "'");
    }
  }
}

TaskCorpus TaskCorpus::synthetic(std::size_t prompts, int min_len, int max_len,
                                 std::uint64_t seed) {
  if (min_len < 1 || max_len > 9 || min_len > max_len) {
    throw std::invalid_argument("synthetic corpus lengths must satisfy 1 <= min <= max <= 9");
  }
  std::vector<CorpusEntry> all;
  for (int len = min_len; len <= max_len; ++len) {
    for (char start = 'a'; start <= 'z'; ++start) {
      std::string target;
      for (int i = 0; i < len; ++i) target += static_cast<char>('a' + (start - 'a' + i) % 26);
      all.push_back({std::string(1, start) + std::to_string(len) + ":", target});
    }
  }
  if (prompts > all.size()) {
    throw std::invalid_argument("synthetic corpus has only " + std::to_string(all.size()) +
                                " distinct prompts for these lengths");
  }
  Rng rng(substream(seed, "data"));
  for (std::size_t i = 0; i < prompts; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(all.size() - i));
    std::swap(all[i], all[j]);
  }
  all.resize(prompts);
  return TaskCorpus(std::move(all));
}

TaskCorpus TaskCorpus::load(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::vector<CorpusEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("prompt") || !j.contains("target") ||
        !j["prompt"].is_string() || !j["target"].is_string()) {
      throw ParseError(line_no, "corpus records need string keys 'prompt' and 'target'");
    }
    entries.push_back({decode_byte_string(j["prompt"].get<std::string>()),
                       decode_byte_string(j["target"].get<std::string>())});
  }
  return TaskCorpus(std::move(entries));
}

void TaskCorpus::save(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& e : entries_) {
    ojson j;
    j["prompt"] = encode_byte_string(e.prompt);
    j["target"] = encode_byte_string(e.target);
    out += j.dump() + "\n";
  }
  atomic_write(path, out);
}

std::vector<std::string> TaskCorpus::prompts() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.prompt);
  return out;
}

const std::string& TaskCorpus::target(std::string_view prompt) const {
  auto it = index_.find(prompt);
  if (it == index_.end()) throw UnknownPromptError("no target for prompt '" + std::string(prompt) + "'");
  return entries_[it->second].target;
}

std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double oracle_score(const RewardOracle& oracle, std::string_view prompt, std::string_view response) {
  if (!oracle.corpus) throw std::invalid_argument("reward oracle has no corpus");
  const std::string& target = oracle.corpus->target(prompt);
  double score = -static_cast<double>(edit_distance(response, target));
  if (oracle.kind == OracleKind::LengthPenalizedMatch) {
    score -= oracle.brevity_coefficient * static_cast<double>(response.size());
  }
  return score;
}

OnPolicyResult build_onpolicy_pairs(const PolicyModel& model, const RewardOracle& oracle,
                                    const std::vector<std::string>& prompts,
                                    const OnPolicyOptions& opts) {
  if (opts.k < 2) throw std::invalid_argument("build_onpolicy_pairs: K must be >= 2");
  OnPolicyResult result;
  const std::uint64_t sampling = substream(opts.seed, "sampling");
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const std::uint64_t prompt_seed = substream(sampling, static_cast<std::uint64_t>(i));
    const auto prompt_tokens = Vocabulary::encode_prompt(prompts[i]);
    std::vector<std::string> responses;
    std::vector<double> scores;
    for (int k = 0; k < opts.k; ++k) {
      const auto seq = model.sample(prompt_tokens, opts.temperature, opts.max_len,
                                    substream(prompt_seed, static_cast<std::uint64_t>(k)));
      responses.push_back(Vocabulary::decode_response(seq.response_tokens));
      scores.push_back(oracle_score(oracle, prompts[i], responses.back()));
    }
    // max_element/min_element return the first extremum: earliest sample wins ties.
    const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
    const auto worst = static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
    if (scores[best] == scores[worst]) {
      ++result.skipped_ties;
      continue;
    }
    PreferencePair p;
    p.id = "onpolicy-" + std::to_string(i);
    p.prompt = prompts[i];
    p.chosen = responses[best];
    p.rejected = responses[worst];
    p.meta["chosen_score"] = scores[best];
    p.meta["rejected_score"] = scores[worst];
    p.meta["chosen_sample"] = best;
    p.meta["rejected_sample"] = worst;
    result.pairs.push_back(std::move(p));
  }
  return result;
}

}  // namespace decaypo

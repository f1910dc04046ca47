#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <memory>
#include <string>
#include <unistd.h>

#include "decaypo/data.hpp"
#include "decaypo/policy_model.hpp"
#include "decaypo/rng.hpp"

using namespace decaypo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("decaypo_test_data_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string random_bytes(Rng& rng, std::size_t max_len, bool binary) {
  std::string s;
  const auto n = 1 + rng.below(max_len);
  for (std::uint64_t i = 0; i < n; ++i) {
    s.push_back(binary ? static_cast<char>(rng.below(256)) : static_cast<char>(' ' + rng.below(95)));
  }
  return s;
}

std::vector<PreferencePair> random_pairs(Rng& rng, std::size_t n) {
  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i < n; ++i) {
    PreferencePair p;
    p.id = "pair-" + std::to_string(i);
    const bool binary = i % 3 == 0;
    p.prompt = random_bytes(rng, 12, binary);
    do {
      p.chosen = random_bytes(rng, 20, binary);
      p.rejected = random_bytes(rng, 20, i % 5 == 0);
    } while (p.chosen == p.rejected);
    if (i % 7 == 0) p.chosen = "b64:not really base64";
    p.meta["index"] = i;
    p.meta["score"] = rng.normal();
    p.meta["tag"] = binary ? "binary" : "text";
    pairs.push_back(std::move(p));
  }
  return pairs;
}

/// Untrained model whose only nonzero output weights feed EOS, so response
/// lengths vary strongly with the context.
PolicyModel eos_heavy_model() {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.context = 64;
  cfg.blocks = 1;
  cfg.seed = 3;
  PolicyModel m = PolicyModel::initialize(cfg);
  RealArray& out = m.parameters().back().value;
  Rng rng(17);
  for (std::size_t r = 0; r < out.rows(); ++r) out.at(r, Vocabulary::kEos) = 0.6 * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("save and load round trip, including non-UTF-8 bytes") {
  TempDir tmp;
  Rng rng(1);
  const auto pairs = random_pairs(rng, 1000);
  const fs::path file = tmp.path / "pairs.jsonl";
  save_pairs(pairs, file);
  CHECK(load_pairs(file) == pairs);
  CHECK(pairs_from_jsonl(pairs_to_jsonl(pairs)) == pairs);
  // Saving is byte-reproducible.
  save_pairs(pairs, tmp.path / "again.jsonl");
  CHECK(read_file(file) == read_file(tmp.path / "again.jsonl"));
}

TEST_CASE("file shape") {
  TempDir tmp;
  save_pairs({}, tmp.path / "empty.jsonl");
  CHECK(fs::file_size(tmp.path / "empty.jsonl") == 0);
  CHECK(load_pairs(tmp.path / "empty.jsonl").empty());

  PreferencePair p{"a", "q1:", "a", "b", nlohmann::ordered_json::object()};
  save_pairs({p}, tmp.path / "one.jsonl");
  const std::string text = read_file(tmp.path / "one.jsonl");
  CHECK(text == "{\"id\":\"a\",\"prompt\":\"q1:\",\"chosen\":\"a\",\"rejected\":\"b\",\"meta\":{}}\n");
  CHECK(std::count(text.begin(), text.end(), '\n') == 1);
}

TEST_CASE("validation error names line 3") {
  const std::string text =
      "{\"id\":\"x1\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\",\"meta\":{}}\n"
      "{\"id\":\"x2\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"c\",\"meta\":{}}\n"
      "{\"id\":\"x3\",\"prompt\":\"p\",\"chosen\":\"same\",\"rejected\":\"same\",\"meta\":{}}\n";
  try {
    pairs_from_jsonl(text);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(e.line() == 3);
    CHECK(e.id() == "x3");
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("malformed lines raise parse errors with line numbers") {
  auto line_of = [](const std::string& text) -> std::size_t {
    try {
      pairs_from_jsonl(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  const std::string good = "{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\",\"meta\":{}}\n";
  CHECK(line_of(good + "{not json\n") == 2);
  CHECK(line_of(good + good + "[1,2]\n") == 3);
  CHECK(line_of("{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"a\"}\n") == 1);
  CHECK(line_of("{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\",\"extra\":1}\n") == 1);
  CHECK(line_of("{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"b64:@@@@\",\"rejected\":\"b\"}\n") == 1);
  CHECK(line_of("{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\",\"meta\":3}\n") == 1);
  // Missing meta defaults to an empty object; blank lines are ignored.
  const auto pairs = pairs_from_jsonl("\n{\"id\":\"x\",\"prompt\":\"p\",\"chosen\":\"a\",\"rejected\":\"b\"}\n\n");
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].meta == nlohmann::ordered_json::object());
  CHECK_THROWS_AS(load_pairs("/nonexistent/decaypo/pairs.jsonl"), std::runtime_error);
}

TEST_CASE("byte-string escaping") {
  CHECK(encode_byte_string("hello") == "hello");
  CHECK(encode_byte_string("caf\xc3\xa9") == "caf\xc3\xa9");
  CHECK(encode_byte_string(std::string("\xff\x00", 2)) == "b64:/wA=");
  CHECK(encode_byte_string("b64:x") == "b64:" + base64_encode("b64:x"));
  CHECK(decode_byte_string("b64:/wA=") == std::string("\xff\x00", 2));
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK(base64_encode("foo") == "Zm9v");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
  CHECK(base64_decode("Zm9vYmE=") == "fooba");
  CHECK_THROWS_AS(base64_decode("Zm9"), std::invalid_argument);
  CHECK_FALSE(is_valid_utf8("\xc0\xaf"));        // overlong
  CHECK_FALSE(is_valid_utf8("\xed\xa0\x80"));    // surrogate
  CHECK_FALSE(is_valid_utf8("\xe2\x82"));        // truncated
  CHECK(is_valid_utf8("\xf0\x9f\x98\x80"));
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const std::string s = random_bytes(rng, 40, true);
    CHECK(decode_byte_string(encode_byte_string(s)) == s);
  }
}

TEST_CASE("atomic_write replaces files and reports the path on failure") {
  TempDir tmp;
  const fs::path f = tmp.path / "out.txt";
  atomic_write(f, "first");
  atomic_write(f, "second");
  CHECK(read_file(f) == "second");
  std::size_t entries = 0;
  for (const auto& e : fs::directory_iterator(tmp.path)) entries += e.is_regular_file() ? 1 : 0;
  CHECK(entries == 1);
  try {
    atomic_write(tmp.path / "missing" / "x.txt", "data");
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("missing") != std::string::npos);
  }
}

TEST_CASE("synthetic corpus and task lookup") {
  const TaskCorpus c = TaskCorpus::synthetic(30, 2, 6, 9);
  CHECK(c.size() == 30);
  CHECK(TaskCorpus::synthetic(30, 2, 6, 9).entries() == c.entries());
  for (const auto& e : c.entries()) {
    const int n = e.prompt[1] - '0';
    CHECK(static_cast<int>(e.target.size()) == n);
    CHECK(e.target[0] == e.prompt[0]);
    CHECK(e.prompt.back() == ':');
    CHECK(c.target(e.prompt) == e.target);
  }
  const TaskCorpus fixed(std::vector<CorpusEntry>{{"y3:", "yza"}});
  CHECK(fixed.target("y3:") == "yza");
  CHECK_THROWS_AS(fixed.target("q1:"), UnknownPromptError);
  CHECK_THROWS_AS(TaskCorpus(std::vector<CorpusEntry>{{"a", "x"}, {"a", "y"}}), std::invalid_argument);
  CHECK_THROWS_AS(TaskCorpus::synthetic(10, 0, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(TaskCorpus::synthetic(1000, 1, 2, 1), std::invalid_argument);

  TempDir tmp;
  c.save(tmp.path / "corpus.jsonl");
  CHECK(TaskCorpus::load(tmp.path / "corpus.jsonl").entries() == c.entries());
}

TEST_CASE("reward oracle") {
  auto corpus = std::make_shared<const TaskCorpus>(std::vector<CorpusEntry>{{"c4:", "cdef"}, {"x2:", "xy"}});
  RewardOracle tm{OracleKind::TargetMatch, corpus, 0.0};
  CHECK(oracle_score(tm, "c4:", "cdef") == 0.0);
  CHECK(oracle_score(tm, "c4:", "cdeg") == -1.0);
  CHECK(oracle_score(tm, "c4:", "cde") == -1.0);
  CHECK(oracle_score(tm, "c4:", "") == -4.0);
  CHECK_THROWS_AS(oracle_score(tm, "zz:", "x"), UnknownPromptError);
  RewardOracle none{OracleKind::TargetMatch, nullptr, 0.0};
  CHECK_THROWS_AS(oracle_score(none, "c4:", "x"), std::invalid_argument);

  RewardOracle lp0{OracleKind::LengthPenalizedMatch, corpus, 0.0};
  RewardOracle lp{OracleKind::LengthPenalizedMatch, corpus, 0.5};
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const std::string r = random_bytes(rng, 10, false);
    CHECK(oracle_score(lp0, "c4:", r) == oracle_score(tm, "c4:", r));
    CHECK(oracle_score(lp, "x2:", r) == oracle_score(tm, "x2:", r) - 0.5 * static_cast<double>(r.size()));
  }
}

TEST_CASE("edit distance") {
  CHECK(edit_distance("", "") == 0);
  CHECK(edit_distance("abc", "") == 3);
  CHECK(edit_distance("kitten", "sitting") == 3);
  CHECK(edit_distance("flaw", "lawn") == 2);
  CHECK(edit_distance("abc", "abc") == 0);
}

TEST_CASE("on-policy pair construction") {
  const PolicyModel model = eos_heavy_model();
  const TaskCorpus corpus = TaskCorpus::synthetic(40, 2, 8, 5);
  auto shared = std::make_shared<const TaskCorpus>(corpus);
  const auto prompts = corpus.prompts();

  SUBCASE("deterministic model at temperature 0 ties every prompt") {
    RewardOracle oracle{OracleKind::TargetMatch, shared, 0.0};
    const auto r = build_onpolicy_pairs(model, oracle, prompts, {2, 0.0, 16, 1});
    CHECK(r.pairs.empty());
    CHECK(r.skipped_ties == prompts.size());
  }
  SUBCASE("same seed gives identical pairs; chosen strictly outscores rejected") {
    RewardOracle oracle{OracleKind::TargetMatch, shared, 0.0};
    const OnPolicyOptions opts{5, 0.8, 16, 11};
    const auto a = build_onpolicy_pairs(model, oracle, prompts, opts);
    const auto b = build_onpolicy_pairs(model, oracle, prompts, opts);
    CHECK(a.pairs == b.pairs);
    CHECK(a.skipped_ties == b.skipped_ties);
    CHECK(a.pairs.size() + a.skipped_ties == prompts.size());
    CHECK(!a.pairs.empty());
    for (const auto& p : a.pairs) {
      CHECK(oracle_score(oracle, p.prompt, p.chosen) > oracle_score(oracle, p.prompt, p.rejected));
      CHECK(p.meta["chosen_score"].get<double>() == oracle_score(oracle, p.prompt, p.chosen));
      CHECK_NOTHROW(p.validate());
    }
    CHECK_THROWS_AS(build_onpolicy_pairs(model, oracle, prompts, {1, 0.8, 16, 11}), std::invalid_argument);
  }
  SUBCASE("length-rewarding and length-penalizing oracles bias chosen lengths") {
    auto mean_gap = [&](double coefficient) {
      RewardOracle oracle{OracleKind::LengthPenalizedMatch, shared, coefficient};
      const auto r = build_onpolicy_pairs(model, oracle, prompts, {5, 1.0, 24, 2});
      REQUIRE(r.pairs.size() >= 10);
      double chosen = 0.0, rejected = 0.0;
      for (const auto& p : r.pairs) {
        chosen += static_cast<double>(p.chosen.size());
        rejected += static_cast<double>(p.rejected.size());
      }
      return (chosen - rejected) / static_cast<double>(r.pairs.size());
    };
    CHECK(mean_gap(-2.0) > 0.0);  // verbosity-biased
    CHECK(mean_gap(1.0) < 0.0);   // brevity-biased
  }
}

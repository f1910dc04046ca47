#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "decaypo/config.hpp"
#include "decaypo/data.hpp"

using namespace decaypo;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("decaypo_test_config_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
}

/// Shared small artifacts: a corpus, a pretrained checkpoint and a pair set.
struct Artifacts {
  TempDir dir;
  std::string corpus = dir / "corpus.jsonl";
  std::string sft = dir / "sft.ckpt";
  std::string pairs = dir / "pairs.jsonl";

  Artifacts() {
    REQUIRE(run({"--seed", "3", "corpus", "--prompts", "24", "--min-len", "2", "--max-len", "6", "--out", corpus})
                .code == 0);
    REQUIRE(run({"--seed", "3", "pretrain", "--corpus", corpus, "--out", sft, "--d-model", "16", "--context", "40",
                 "--blocks", "1", "--steps", "40"})
                .code == 0);
    const Run r = run({"--seed", "3", "build-pairs", "--model", sft, "--corpus", corpus, "--out", pairs, "--k", "4",
                       "--temperature", "1.0", "--max-len", "10"});
    REQUIRE(r.code == 0);
  }
};

const Artifacts& artifacts() {
  static const Artifacts a;
  return a;
}

std::vector<std::string> train_args(const std::string& out) {
  const auto& a = artifacts();
  return {"--seed", "5", "train", "--pairs", a.pairs, "--init", a.sft, "--out", out, "--batch-size", "4",
          "--steps", "6"};
}

/// Temporarily sets an environment variable.
struct EnvVar {
  std::string name;
  EnvVar(std::string n, const std::string& value) : name(std::move(n)) { ::setenv(name.c_str(), value.c_str(), 1); }
  ~EnvVar() { ::unsetenv(name.c_str()); }
};

}  // namespace

TEST_CASE("unknown flags and keys are validation errors naming the culprit") {
  TempDir dir;
  Run r = run({"mdp-verify", "--seeds", "2", "--out", dir / "x.csv", "--bogus-flag", "1"});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("--bogus-flag") != std::string::npos);

  const std::string ini = dir / "bad.ini";
  write_text(ini, "[mdp-verify]\nseeds = 2\nnot_a_key = 3\n");
  r = run({"--config", ini, "mdp-verify", "--out", dir / "x.csv"});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("not_a_key") != std::string::npos);

  r = run({"mdp-verify"});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("--out") != std::string::npos);

  r = run({"no-such-command"});
  CHECK(r.code == kExitValidation);
  r = run({});
  CHECK(r.code == kExitValidation);
}

TEST_CASE("bad values are validation errors naming the flag") {
  TempDir dir;
  Run r = run({"mdp-verify", "--gammas", "0.5,abc", "--out", dir / "x.csv"});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("gammas") != std::string::npos);
  r = run({"mdp-verify", "--gammas", "0.5,1.5", "--out", dir / "x.csv"});
  CHECK(r.code == kExitValidation);
  r = run({"mdp-verify", "--seeds", "many", "--out", dir / "x.csv"});
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("--seeds") != std::string::npos);

  const auto& a = artifacts();
  auto args = train_args(dir / "m.ckpt");
  args.insert(args.end(), {"--method", "rlhf"});
  r = run(args);
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("method") != std::string::npos);
  args = train_args(dir / "m.ckpt");
  args.insert(args.end(), {"--method", "simpo", "--reference", a.sft});
  r = run(args);
  CHECK(r.code == kExitValidation);
  CHECK(r.err.find("reference") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "m.ckpt"));
}

TEST_CASE("runtime failures exit with code 2") {
  TempDir dir;
  const auto& a = artifacts();
  const Run r = run({"train", "--pairs", a.pairs, "--init", dir / "missing.ckpt", "--out", dir / "m.ckpt"});
  CHECK(r.code == kExitRuntime);
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("mdp-verify writes one row per seed and gamma, all holding") {
  TempDir dir;
  const std::string out = dir / "bound.csv";
  const Run r = run({"mdp-verify", "--seeds", "100", "--gammas", "0.5,0.9,0.95,0.98,1.0", "--out", out});
  REQUIRE(r.code == 0);
  std::istringstream in(read_file(out));
  std::string line;
  int rows = 0, holds = 0;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.starts_with("#")) continue;
    if (!header) {
      CHECK(line == "seed,gamma,delta1,delta2,delta3,subopt,term1,term2,bound,tv,holds");
      header = true;
      continue;
    }
    ++rows;
    holds += line.ends_with(",1") ? 1 : 0;
  }
  CHECK(rows == 500);
  CHECK(holds == 500);
  CHECK(fs::exists(out + ".config.ini"));
}

TEST_CASE("gamma 1.0 and the uniform schedule give identical metrics") {
  TempDir dir;
  auto a = train_args(dir / "g1.ckpt");
  a.insert(a.end(), {"--method", "d2po", "--gamma", "1.0"});
  auto b = train_args(dir / "uni.ckpt");
  b.insert(b.end(), {"--method", "d2po", "--schedule", "uniform"});
  auto c = train_args(dir / "dpo.ckpt");
  c.insert(c.end(), {"--method", "dpo"});
  REQUIRE(run(a).code == 0);
  REQUIRE(run(b).code == 0);
  REQUIRE(run(c).code == 0);
  const std::string ma = read_file(dir / "g1.ckpt.metrics.jsonl");
  CHECK(!ma.empty());
  CHECK(ma == read_file(dir / "uni.ckpt.metrics.jsonl"));
  CHECK(ma == read_file(dir / "dpo.ckpt.metrics.jsonl"));
}

TEST_CASE("runs are byte-reproducible and the snapshot reproduces them") {
  TempDir dir;
  auto args = train_args(dir / "m.ckpt");
  args.insert(args.end(), {"--gamma", "0.9", "--origin", "answer"});
  REQUIRE(run(args).code == 0);
  const std::string ckpt = read_file(dir / "m.ckpt");
  const std::string metrics = read_file(dir / "m.ckpt.metrics.jsonl");
  const std::string snapshot = read_file(dir / "m.ckpt.config.ini");
  CHECK(snapshot.find("gamma = 0.9") != std::string::npos);
  CHECK(snapshot.find("origin = \"answer\"") != std::string::npos);
  CHECK(snapshot.find("seed = 5") != std::string::npos);

  REQUIRE(run(args).code == 0);
  CHECK(read_file(dir / "m.ckpt") == ckpt);
  CHECK(read_file(dir / "m.ckpt.metrics.jsonl") == metrics);

  // Feed the snapshot back in: same outputs, same snapshot.
  fs::remove(dir / "m.ckpt");
  const std::string ini = dir / "snap.ini";
  write_text(ini, snapshot);
  const Run r = run({"--config", ini, "train"});
  REQUIRE(r.code == 0);
  CHECK(read_file(dir / "m.ckpt") == ckpt);
  CHECK(read_file(dir / "m.ckpt.metrics.jsonl") == metrics);
  CHECK(read_file(dir / "m.ckpt.config.ini") == snapshot);
}

TEST_CASE("flags override the config file") {
  TempDir dir;
  const std::string ini = dir / "c.ini";
  write_text(ini, "seed = 9\n[mdp-verify]\nseeds = 3\ngammas = 0.5\nout = \"" + (dir / "a.csv") + "\"\n");
  REQUIRE(run({"--config", ini, "mdp-verify"}).code == 0);
  REQUIRE(run({"--config", ini, "mdp-verify", "--seeds", "4", "--out", dir / "b.csv"}).code == 0);
  const std::string snap_a = read_file(dir / "a.csv.config.ini");
  const std::string snap_b = read_file(dir / "b.csv.config.ini");
  CHECK(snap_a.find("seeds = 3") != std::string::npos);
  CHECK(snap_b.find("seeds = 4") != std::string::npos);
  CHECK(snap_b.find("seed = 9") != std::string::npos);
}

TEST_CASE("DECAYPO_SEED overrides the config seed but not the flag") {
  TempDir dir;
  REQUIRE(run({"--seed", "7", "corpus", "--prompts", "15", "--out", dir / "flag7.jsonl"}).code == 0);
  REQUIRE(run({"--seed", "8", "corpus", "--prompts", "15", "--out", dir / "flag8.jsonl"}).code == 0);
  const std::string ini = dir / "c.ini";
  write_text(ini, "seed = 8\n");
  {
    EnvVar env("DECAYPO_SEED", "7");
    REQUIRE(run({"--config", ini, "corpus", "--prompts", "15", "--out", dir / "env.jsonl"}).code == 0);
    REQUIRE(run({"--seed", "8", "corpus", "--prompts", "15", "--out", dir / "both.jsonl"}).code == 0);
  }
  CHECK(read_file(dir / "env.jsonl") == read_file(dir / "flag7.jsonl"));
  CHECK(read_file(dir / "both.jsonl") == read_file(dir / "flag8.jsonl"));
  CHECK(read_file(dir / "flag7.jsonl") != read_file(dir / "flag8.jsonl"));
  {
    EnvVar env("DECAYPO_SEED", "seven");
    const Run r = run({"corpus", "--out", dir / "x.jsonl"});
    CHECK(r.code == kExitValidation);
    CHECK(r.err.find("DECAYPO_SEED") != std::string::npos);
  }
}

TEST_CASE("analysis subcommands run on the shared artifacts") {
  TempDir dir;
  const auto& a = artifacts();
  REQUIRE(run({"--seed", "5", "train", "--pairs", a.pairs, "--init", a.sft, "--out", dir / "p.ckpt", "--steps", "4",
               "--batch-size", "4"})
              .code == 0);
  const std::string p = dir / "p.ckpt";
  CHECK(run({"analyze", "kl-position", "--policy", p, "--reference", a.sft, "--corpus", a.corpus, "--out",
             dir / "kl.csv", "--max-len", "8"})
            .code == 0);
  CHECK(run({"analyze", "prob-position", "--model", p, "--corpus", a.corpus, "--out", dir / "prob.csv",
             "--max-len", "8"})
            .code == 0);
  CHECK(run({"analyze", "ref-margin", "--reference", a.sft, "--pairs", a.pairs, "--out", dir / "rm.csv"}).code == 0);
  CHECK(run({"analyze", "length-bias", "--policy", p, "--reference", a.sft, "--pairs", a.pairs, "--out",
             dir / "lb.csv"})
            .code == 0);
  CHECK(run({"sample", "--model", p, "--corpus", a.corpus, "--out", dir / "s.jsonl", "--max-len", "8"}).code == 0);
  CHECK(run({"eval", "--candidate", p, "--baseline", a.sft, "--corpus", a.corpus, "--out", dir / "w.json",
             "--max-len", "8"})
            .code == 0);
  for (const char* f : {"kl.csv", "prob.csv", "rm.csv", "lb.csv", "s.jsonl", "w.json"}) {
    INFO(f);
    CHECK(!read_file(dir / f).empty());
    CHECK(fs::exists(dir / (std::string(f) + ".config.ini")));
  }
  const auto w = nlohmann::json::parse(read_file(dir / "w.json"));
  CHECK(w.at("win").get<int>() + w.at("tie").get<int>() + w.at("lose").get<int>() == 24);
}

TEST_CASE("the binary reports exit codes to the shell") {
  const std::string cli = DECAYPO_CLI_PATH;
  const int status = std::system((cli + " mdp-verify --definitely-unknown 2>/dev/null").c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == kExitValidation);
  const int help = std::system((cli + " --help >/dev/null").c_str());
  REQUIRE(WIFEXITED(help));
  CHECK(WEXITSTATUS(help) == kExitOk);
}

TEST_CASE("list parsing") {
  CHECK(parse_real_list("0.5, 0.9,1") == std::vector<double>{0.5, 0.9, 1.0});
  CHECK(parse_int_list("-8,-4,0,4") == std::vector<int>{-8, -4, 0, 4});
  CHECK_THROWS_AS(parse_real_list(""), std::invalid_argument);
  CHECK_THROWS_AS(parse_real_list("1,,2"), std::invalid_argument);
  CHECK_THROWS_AS(parse_real_list("1,nan"), std::invalid_argument);
  CHECK_THROWS_AS(parse_int_list("1.5"), std::invalid_argument);
}

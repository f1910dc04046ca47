#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "decaypo/analysis.hpp"
#include "decaypo/rng.hpp"
#include "decaypo/training.hpp"
#include "support/oracles.hpp"

using namespace decaypo;

namespace {

PolicyModel two_token_model(double a, double b) {
  ModelConfig cfg;
  cfg.vocab_size = 2;
  cfg.d_model = 1;
  cfg.context = 8;
  cfg.blocks = 0;
  cfg.norm_eps = 0.0;
  std::vector<Parameter> params{
      {"tok_emb", RealArray::matrix(2, 1, {1.0, -1.0})},
      {"pos_emb", RealArray({8, 1})},
      {"out", RealArray::matrix(1, 2, {a, b})},
  };
  return PolicyModel(cfg, std::move(params));
}

ModelConfig tiny_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.context = 48;
  cfg.blocks = 1;
  cfg.seed = seed;
  return cfg;
}

/// A small SFT model on the synthetic task, shared by the qualitative checks.
struct TrainedFixture {
  TaskCorpus corpus = TaskCorpus::synthetic(60, 3, 8, 21);
  PolicyModel init = PolicyModel::initialize(tiny_config(21));
  PolicyModel sft = [this] {
    SftConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 16;
    cfg.seed = 21;
    return pretrain_sft(tiny_config(21), corpus, cfg);
  }();
};

const TrainedFixture& fixture() {
  static const TrainedFixture f;
  return f;
}

/// Targets start at a letter the prompt does not reveal and then continue
/// alphabetically, so only the first response token is uncertain.
PolicyModel continuation_model() {
  Rng rng(5);
  std::vector<CorpusEntry> entries;
  for (int i = 0; i < 80; ++i) {
    const auto start = rng.below(26);
    std::string target;
    for (std::uint64_t k = 0; k < 8; ++k) target += static_cast<char>('a' + (start + k) % 26);
    char prompt[8];
    std::snprintf(prompt, sizeof prompt, "s%02d:", i);
    entries.push_back({prompt, target});
  }
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.context = 48;
  cfg.blocks = 1;
  cfg.seed = 21;
  SftConfig sft;
  sft.steps = 500;
  sft.batch_size = 16;
  sft.seed = 21;
  return pretrain_sft(cfg, TaskCorpus(std::move(entries)), sft);
}

std::vector<TokenSequence> draw(const PolicyModel& m, const std::vector<std::string>& prompts, int per_prompt,
                                double temperature, int max_len, std::uint64_t seed) {
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int j = 0; j < per_prompt; ++j) {
      out.push_back(m.sample(Vocabulary::encode_prompt(prompts[i]), temperature, max_len,
                             substream(seed, i * 100 + static_cast<std::size_t>(j))));
    }
  }
  return out;
}

double sample_variance(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size() - 1);
}

PairScore score_with_lengths(Rng& rng, int tw, int tl) {
  PairScore s;
  s.chosen_logps = decaypo::testing::random_logps(rng, static_cast<std::size_t>(tw));
  s.rejected_logps = decaypo::testing::random_logps(rng, static_cast<std::size_t>(tl));
  s.chosen_ref_logps = decaypo::testing::random_logps(rng, static_cast<std::size_t>(tw));
  s.rejected_ref_logps = decaypo::testing::random_logps(rng, static_cast<std::size_t>(tl));
  s.prompt_len = 3;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// KL per position

TEST_CASE("KL of identical models is exactly zero") {
  const PolicyModel m = fixture().sft;
  const auto samples = draw(m, fixture().corpus.prompts(), 1, 1.0, 12, 4);
  const PositionCurve c = kl_per_position(m, m, samples, 12);
  REQUIRE(!c.rows.empty());
  for (const auto& r : c.rows) CHECK(r.value == 0.0);
}

TEST_CASE("KL at a single position matches the hand value") {
  // Policy [0.5, 0.5]; reference P(0 | 0) = sigma(a - b) = 0.25.
  const PolicyModel policy = two_token_model(0.0, 0.0);
  const PolicyModel reference = two_token_model(0.0, std::log(3.0));
  const std::vector<TokenSequence> samples{{{0}, {1}}, {{0}, {0}}};
  const PositionCurve c = kl_per_position(policy, reference, samples, 4);
  REQUIRE(c.rows.size() == 1);
  const double want = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(std::abs(c.rows[0].value - want) <= 1e-12);
  CHECK(c.rows[0].value == doctest::Approx(0.143841).epsilon(1e-6));
  CHECK_THROWS_AS(kl_per_position(policy, reference, {}, 4), std::invalid_argument);
  CHECK_THROWS_AS(kl_per_position(policy, fixture().sft, samples, 4), std::invalid_argument);
}

TEST_CASE("KL is nonnegative and uses survivor means") {
  const auto& f = fixture();
  const auto samples = draw(f.sft, f.corpus.prompts(), 2, 1.0, 10, 5);
  const PositionCurve c = kl_per_position(f.sft, f.init, samples, 10);
  const auto counts = survivor_counts(samples, 10);
  std::size_t populated = 0;
  for (auto n : counts) populated += n > 0 ? 1 : 0;
  CHECK(c.rows.size() == populated);
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    CHECK(c.rows[i].value >= 0.0);
    CHECK(std::isfinite(c.rows[i].value));
    if (i > 0) CHECK(c.rows[i].position > c.rows[i - 1].position);
  }
  CHECK(counts[0] == samples.size());
  // Deterministic.
  CHECK(kl_per_position(f.sft, f.init, samples, 10) == c);

  // Survivor mean at position 1 by hand, from full distributions.
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.response_len() < 2) continue;
    std::vector<int> ctx = s.prompt_tokens;
    ctx.push_back(s.response_tokens[0]);
    const RealArray p = f.sft.next_token_distribution(ctx);
    const RealArray q = f.init.next_token_distribution(ctx);
    double kl = 0.0;
    for (std::size_t v = 0; v < p.size(); ++v) kl += p[v] * std::log(p[v] / q[v]);
    sum += kl;
    ++n;
  }
  REQUIRE(n > 0);
  CHECK(std::abs(c.rows[1].value - sum / static_cast<double>(n)) <= 1e-9);
}

// ---------------------------------------------------------------------------
// Reference margins

TEST_CASE("density histograms integrate to one") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v;
    const auto n = 2 + rng.below(300);
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(3.0 * rng.normal());
    const int bins = 2 + static_cast<int>(rng.below(40));
    const DensityHistogram h = density_histogram(v, bins);
    CHECK(h.centers.size() == static_cast<std::size_t>(bins));
    double total = 0.0;
    for (double d : h.density) {
      CHECK(d >= 0.0);
      total += d * h.bin_width;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
  const DensityHistogram spike = density_histogram(std::vector<double>(7, 0.0), 5);
  int nonzero = 0;
  for (std::size_t i = 0; i < spike.density.size(); ++i) {
    if (spike.density[i] > 0.0) {
      ++nonzero;
      CHECK(spike.centers[i] - spike.bin_width / 2 <= 0.0);
      CHECK(spike.centers[i] + spike.bin_width / 2 >= 0.0);
    }
  }
  CHECK(nonzero == 1);
  CHECK_THROWS_AS(density_histogram({}, 5), std::invalid_argument);
  CHECK_THROWS_AS(density_histogram({1.0, 2.0}, 1), std::invalid_argument);
}

TEST_CASE("ref_margin_density of identical responses is a single spike at zero") {
  const auto& f = fixture();
  std::vector<PreferencePair> pairs;
  for (int i = 0; i < 5; ++i) {
    // Bypasses PreferencePair validation on purpose.
    pairs.push_back({"p" + std::to_string(i), "a3:", "abc", "abc", nlohmann::ordered_json::object()});
  }
  for (double m : reference_margins(f.sft, pairs)) CHECK(m == 0.0);
  const DensityHistogram h = ref_margin_density(f.sft, pairs, 10);
  double total = 0.0;
  int nonzero = 0;
  for (double d : h.density) {
    total += d * h.bin_width;
    nonzero += d > 0.0 ? 1 : 0;
  }
  CHECK(nonzero == 1);
  CHECK(std::abs(total - 1.0) <= 1e-6);
  CHECK_THROWS_AS(ref_margin_density(f.sft, {}, 10), std::invalid_argument);
  CHECK_THROWS_AS(ref_margin_density(f.sft, pairs, 1), std::invalid_argument);
}

TEST_CASE("reference margins are sequence log-prob differences") {
  const auto& f = fixture();
  const PreferencePair p{"x", "c4:", "cdef", "cdxy", nlohmann::ordered_json::object()};
  const auto prompt = Vocabulary::encode_prompt(p.prompt);
  auto seqlp = [&](const std::string& r) {
    const RealArray lp = f.sft.token_logprobs({prompt, Vocabulary::encode_response(r)});
    return std::accumulate(lp.values().begin(), lp.values().end(), 0.0);
  };
  const auto m = reference_margins(f.sft, {p});
  CHECK(std::abs(m[0] - (seqlp("cdef") - seqlp("cdxy"))) <= 1e-12);
  CHECK(m[0] > 0.0);
}

TEST_CASE("on-policy pairs have smaller reference-margin variance than off-policy pairs") {
  const auto& f = fixture();
  auto corpus = std::make_shared<const TaskCorpus>(f.corpus);
  const RewardOracle oracle{OracleKind::TargetMatch, corpus, 0.0};
  const auto on = build_onpolicy_pairs(f.sft, oracle, f.corpus.prompts(), {5, 0.8, 16, 8});
  // Off-policy: the same construction with responses from a different model.
  ModelConfig other_cfg = tiny_config(99);
  PolicyModel other = PolicyModel::initialize(other_cfg);
  Rng rng(99);
  for (double& v : other.parameters().back().value.values()) v = 0.5 * rng.normal();
  const auto off = build_onpolicy_pairs(other, oracle, f.corpus.prompts(), {5, 0.8, 16, 8});
  REQUIRE(on.pairs.size() >= 10);
  REQUIRE(off.pairs.size() >= 10);
  const double v_on = sample_variance(reference_margins(f.sft, on.pairs));
  const double v_off = sample_variance(reference_margins(f.sft, off.pairs));
  INFO("on-policy variance " << v_on << ", off-policy variance " << v_off);
  CHECK(v_on < v_off);
}

// ---------------------------------------------------------------------------
// Probability per position

TEST_CASE("prob_per_position") {
  const auto& f = fixture();
  const auto samples = draw(f.init, f.corpus.prompts(), 1, 1.0, 6, 3);
  const PositionCurve flat = prob_per_position(f.init, samples, 6);
  for (const auto& r : flat.rows) CHECK(std::abs(r.value - 1.0 / 258.0) <= 1e-15);
  CHECK_THROWS_AS(prob_per_position(f.init, {}, 6), std::invalid_argument);

  const PolicyModel m = continuation_model();
  std::vector<std::string> prompts;
  for (int i = 0; i < 80; ++i) {
    char prompt[8];
    std::snprintf(prompt, sizeof prompt, "s%02d:", i);
    prompts.push_back(prompt);
  }
  const auto trained = draw(m, prompts, 2, 1.0, 12, 7);
  const PositionCurve c = prob_per_position(m, trained, 12);
  std::vector<double> pos, val;
  const auto counts = survivor_counts(trained, 12);
  for (const auto& r : c.rows) {
    CHECK(r.value > 0.0);
    CHECK(r.value <= 1.0);
    if (counts[static_cast<std::size_t>(r.position)] < 30) continue;
    pos.push_back(r.position);
    val.push_back(r.value);
  }
  REQUIRE(pos.size() >= 4);
  INFO("spearman " << spearman(pos, val));
  CHECK(spearman(pos, val) > 0.0);
}

// ---------------------------------------------------------------------------
// Loss by length gap

TEST_CASE("loss_by_length_gap") {
  const LossConfig cfg = LossConfig::dpo(0.1);
  Rng rng(12);
  const PairScore one = score_with_lengths(rng, 4, 2);
  const std::vector<PairScore> same(6, one);
  const std::vector<int> bins{-8, -4, -2, 0, 2, 4, 8};
  const GapTable t = loss_by_length_gap(cfg, same, bins);
  CHECK(t.rows.size() == bins.size());  // six bins plus overflow
  for (const auto& r : t.rows) {
    if (r.count == 0) {
      CHECK(r.mean_loss == 0.0);
      continue;
    }
    CHECK(std::abs(r.mean_loss - pair_loss(one, cfg)) <= 1e-15);
    CHECK(r.lo == 2);
    CHECK(r.hi == 4);
  }

  std::vector<PairScore> mixed;
  for (int i = 0; i < 40; ++i) {
    mixed.push_back(score_with_lengths(rng, 1 + static_cast<int>(rng.below(12)), 1 + static_cast<int>(rng.below(12))));
  }
  const GapTable all = loss_by_length_gap(cfg, mixed, {-20, 20});
  REQUIRE(all.rows.size() == 2);
  CHECK(all.rows[0].count == mixed.size());
  CHECK(std::abs(all.rows[0].mean_loss - batch_loss(mixed, cfg)) <= 1e-12);
  CHECK(all.rows[1].overflow);
  CHECK(all.rows[1].count == 0);

  const GapTable narrow = loss_by_length_gap(cfg, mixed, {-1, 1});
  std::size_t total = 0;
  for (const auto& r : narrow.rows) total += r.count;
  CHECK(total == mixed.size());
  CHECK(narrow.rows.back().overflow);
  CHECK_THROWS_AS(loss_by_length_gap(cfg, mixed, {2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(loss_by_length_gap(cfg, mixed, {3}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Spearman and CSV

TEST_CASE("spearman with ties") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Average ranks: x ranks 1, 2.5, 2.5, 4; y ranks 1, 2, 3, 4 -> rho = 0.9486833.
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == doctest::Approx(0.9486832980505138).epsilon(1e-12));
  CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
  CHECK_THROWS_AS(spearman({1, 2}, {1}), std::invalid_argument);
}

TEST_CASE("CSV round trips") {
  PositionCurve c{{{0, 0.5}, {1, 0.25}, {3, 1e-300}}, {"kl direction: test"}};
  const std::string text = to_csv(c);
  CHECK(text.find("position,value\n") != std::string::npos);
  CHECK(text.rfind("# kl direction: test", 0) == 0);
  CHECK(position_curve_from_csv(text) == c);

  DensityHistogram h = density_histogram({0.1, 0.2, 0.2, 0.9, -1.3}, 4);
  h.notes.push_back("binning: equal width");
  const std::string ht = to_csv(h);
  CHECK(ht.find("value,density\n") != std::string::npos);
  CHECK(histogram_from_csv(ht) == h);

  Rng rng(2);
  std::vector<PairScore> scored;
  for (int i = 0; i < 20; ++i) scored.push_back(score_with_lengths(rng, 1 + static_cast<int>(rng.below(6)), 1 + static_cast<int>(rng.below(6))));
  const GapTable g = loss_by_length_gap(LossConfig::dpo(), scored, {-2, 0, 2});
  const std::string gt = to_csv(g);
  CHECK(gt.find("gap_lo,gap_hi,mean_loss,count\n") != std::string::npos);
  CHECK(gap_table_from_csv(gt) == g);

  CHECK_THROWS_AS(position_curve_from_csv("pos,val\n1,2\n"), ParseError);
  CHECK_THROWS_AS(histogram_from_csv("# only a comment\n"), ParseError);
}

#include "decaypo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "decaypo/rng.hpp"

namespace decaypo {

std::string to_string(LossMethod m) {
  switch (m) {
    case LossMethod::D2PO: return "d2po";
    case LossMethod::D2PO_RefFree: return "d2po-ref-free";
    case LossMethod::SimPO: return "simpo";
    case LossMethod::IPO: return "ipo";
    case LossMethod::KTO: return "kto";
    case LossMethod::ORPO: return "orpo";
    case LossMethod::SamPO: return "sampo";
  }
  return "?";
}

LossMethod parse_loss_method(std::string_view s) {
  if (s == "d2po" || s == "dpo") return LossMethod::D2PO;
  if (s == "d2po-ref-free" || s == "d2po_ref_free") return LossMethod::D2PO_RefFree;
  if (s == "simpo") return LossMethod::SimPO;
  if (s == "ipo") return LossMethod::IPO;
  if (s == "kto") return LossMethod::KTO;
  if (s == "orpo") return LossMethod::ORPO;
  if (s == "sampo") return LossMethod::SamPO;
  throw std::invalid_argument("unknown loss method '" + std::string(s) + "'");
}

bool needs_reference(LossMethod m) {
  return m == LossMethod::D2PO || m == LossMethod::IPO || m == LossMethod::KTO ||
         m == LossMethod::SamPO;
}

LossConfig LossConfig::dpo(double beta) {
  LossConfig c;
  c.method = LossMethod::D2PO;
  c.beta = beta;
  c.schedule = DecaySchedule{DecayKind::Uniform, 1.0, DecayOrigin::PromptStart};
  return c;
}

void LossConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be > 0");
  schedule.validate();
  if (method == LossMethod::IPO && !(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
}

void PairScore::validate() const {
  auto check = [](const RealArray& a, const char* what) {
    if (a.size() == 0) throw std::invalid_argument(std::string(what) + " is empty");
    for (double v : a.values()) {
      if (!std::isfinite(v) || v > 0.0) {
        throw std::invalid_argument(std::string(what) + " has an entry that is not a finite log-probability");
      }
    }
  };
  check(chosen_logps, "chosen_logps");
  check(rejected_logps, "rejected_logps");
  if (chosen_ref_logps) {
    check(*chosen_ref_logps, "chosen_ref_logps");
    if (chosen_ref_logps->size() != chosen_logps.size())
      throw std::invalid_argument("chosen_ref_logps length differs from chosen_logps");
  }
  if (rejected_ref_logps) {
    check(*rejected_ref_logps, "rejected_ref_logps");
    if (rejected_ref_logps->size() != rejected_logps.size())
      throw std::invalid_argument("rejected_ref_logps length differs from rejected_logps");
  }
}

PairScore PairScore::swapped() const {
  PairScore s = *this;
  std::swap(s.chosen_logps, s.rejected_logps);
  std::swap(s.chosen_ref_logps, s.rejected_ref_logps);
  return s;
}

// ---------------------------------------------------------------------------
// Tape forms

namespace {

void require_reference(const TapedPair& p, const char* method) {
  if (!p.chosen_ref || !p.rejected_ref) {
    throw std::invalid_argument(std::string(method) + " requires reference log-probabilities");
  }
}

Var log_ratio(Var logps, const RealArray& ref) {
  return sub(logps, logps.tape().constant(ref));
}

std::vector<double> scaled(std::vector<double> w, double c) {
  for (double& v : w) v *= c;
  return w;
}

std::vector<double> filled(std::size_t n, double v) { return std::vector<double>(n, v); }

// -log sigma(m)
LossValue neg_logsigmoid(Var margin) {
  return {scale(logsigmoid(margin), -1.0), margin.item()};
}

LossValue decayed_contrast(Var chosen, Var rejected, int prompt_len, const LossConfig& cfg) {
  const auto& s = cfg.schedule;
  const auto tw = static_cast<int>(chosen.value().size());
  const auto tl = static_cast<int>(rejected.value().size());
  const auto ww = scaled(decay_weights(s, tw, prompt_len), cfg.beta);
  const auto wl = scaled(decay_weights(s, tl, prompt_len), cfg.beta);
  return neg_logsigmoid(sub(weighted_sum(chosen, ww), weighted_sum(rejected, wl)));
}

}  // namespace

LossValue d2po_loss(const TapedPair& p, const LossConfig& cfg) {
  require_reference(p, "d2po_loss");
  return decayed_contrast(log_ratio(p.chosen, *p.chosen_ref), log_ratio(p.rejected, *p.rejected_ref),
                          p.prompt_len, cfg);
}

LossValue d2po_ref_free_loss(const TapedPair& p, const LossConfig& cfg) {
  return decayed_contrast(p.chosen, p.rejected, p.prompt_len, cfg);
}

LossValue simpo_loss(const TapedPair& p, const LossConfig& cfg) {
  const std::size_t tw = p.chosen.value().size(), tl = p.rejected.value().size();
  Var m = sub(weighted_sum(p.chosen, filled(tw, cfg.beta / static_cast<double>(tw))),
              weighted_sum(p.rejected, filled(tl, cfg.beta / static_cast<double>(tl))));
  return neg_logsigmoid(shift(m, -cfg.target_margin));
}

LossValue ipo_loss(const TapedPair& p, const LossConfig& cfg) {
  require_reference(p, "ipo_loss");
  if (!(cfg.tau > 0.0)) throw std::invalid_argument("ipo_loss: tau must be > 0");
  Var h = sub(sum(log_ratio(p.chosen, *p.chosen_ref)), sum(log_ratio(p.rejected, *p.rejected_ref)));
  const double margin = h.item();
  return {square(shift(h, -1.0 / (2.0 * cfg.tau))), margin};
}

LossValue orpo_loss(const TapedPair& p, const LossConfig& cfg) {
  const std::size_t tw = p.chosen.value().size(), tl = p.rejected.value().size();
  Var mw = weighted_sum(p.chosen, filled(tw, 1.0 / static_cast<double>(tw)));
  Var ml = weighted_sum(p.rejected, filled(tl, 1.0 / static_cast<double>(tl)));
  if (!(mw.item() < 0.0) || !(ml.item() < 0.0)) {
    throw std::domain_error("orpo_loss: mean log-probability 0 gives p = 1 and singular odds");
  }
  // log odds(p) = log p - log(1 - p) with log p the mean log-probability.
  Var odds_w = sub(mw, log1mexp(mw));
  Var odds_l = sub(ml, log1mexp(ml));
  Var gap = sub(odds_w, odds_l);
  Var penalty = scale(logsigmoid(gap), -cfg.lambda_orpo);
  return {add(scale(mw, -1.0), penalty), gap.item()};
}

SampoSelection sampo_indices(std::size_t chosen_len, std::size_t rejected_len, std::uint64_t seed,
                             std::uint64_t example_id) {
  auto all = [](std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  };
  SampoSelection sel{all(chosen_len), all(rejected_len)};
  if (chosen_len == rejected_len) return sel;
  const std::size_t keep = std::min(chosen_len, rejected_len);
  auto& longer = chosen_len > rejected_len ? sel.chosen : sel.rejected;
  Rng rng(substream(substream(seed, "sampo"), example_id));
  // Partial Fisher-Yates: the first `keep` slots become the sample.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(longer.size() - i));
    std::swap(longer[i], longer[j]);
  }
  longer.resize(keep);
  std::sort(longer.begin(), longer.end());
  return sel;
}

LossValue sampo_loss(const TapedPair& p, const LossConfig& cfg) {
  require_reference(p, "sampo_loss");
  const std::size_t tw = p.chosen.value().size(), tl = p.rejected.value().size();
  const auto sel = sampo_indices(tw, tl, cfg.sampo_seed, p.example_id);
  std::vector<double> ww(tw, 0.0), wl(tl, 0.0);
  for (std::size_t i : sel.chosen) ww[i] = cfg.beta;
  for (std::size_t i : sel.rejected) wl[i] = cfg.beta;
  Var m = sub(weighted_sum(log_ratio(p.chosen, *p.chosen_ref), ww),
              weighted_sum(log_ratio(p.rejected, *p.rejected_ref), wl));
  return neg_logsigmoid(m);
}

double kto_reference_point(std::span<const TapedPair> batch, const LossConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("kto_reference_point: empty batch");
  double acc = 0.0;
  for (const auto& p : batch) {
    require_reference(p, "kto");
    const RealArray& lp = p.rejected.value();
    double ratio = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) ratio += lp[i] - (*p.rejected_ref)[i];
    acc += cfg.beta * ratio / static_cast<double>(lp.size());
  }
  return std::max(0.0, acc / static_cast<double>(batch.size()));
}

LossValue kto_loss(std::span<const TapedPair> batch, const LossConfig& cfg, double z_ref) {
  if (batch.empty()) throw std::invalid_argument("kto_loss: empty batch");
  const double z = std::max(0.0, z_ref);
  Var total;
  double margin = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    require_reference(p, "kto_loss");
    Var rw = scale(sum(log_ratio(p.chosen, *p.chosen_ref)), cfg.beta);
    Var rl = scale(sum(log_ratio(p.rejected, *p.rejected_ref)), cfg.beta);
    // Desirable responses are pulled above z, undesirable ones pushed below.
    Var term = add(scale(sigmoid(shift(rw, -z)), -cfg.lambda_w),
                   scale(sigmoid(shift(rl, -z)), cfg.lambda_l));
    total = i == 0 ? term : add(total, term);
    margin += rw.item() - rl.item();
  }
  const double n = static_cast<double>(batch.size());
  return {scale(total, 1.0 / n), margin / n};
}

LossValue pair_loss(const TapedPair& p, const LossConfig& cfg) {
  switch (cfg.method) {
    case LossMethod::D2PO: return d2po_loss(p, cfg);
    case LossMethod::D2PO_RefFree: return d2po_ref_free_loss(p, cfg);
    case LossMethod::SimPO: return simpo_loss(p, cfg);
    case LossMethod::IPO: return ipo_loss(p, cfg);
    case LossMethod::ORPO: return orpo_loss(p, cfg);
    case LossMethod::SamPO: return sampo_loss(p, cfg);
    case LossMethod::KTO: {
      const TapedPair one[] = {p};
      return kto_loss(one, cfg, kto_reference_point(one, cfg));
    }
  }
  throw std::invalid_argument("pair_loss: unknown method");
}

LossValue batch_loss(std::span<const TapedPair> batch, const LossConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  if (cfg.method == LossMethod::KTO) return kto_loss(batch, cfg, kto_reference_point(batch, cfg));
  Var total;
  double margin = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    LossValue v = pair_loss(batch[i], cfg);
    total = i == 0 ? v.loss : add(total, v.loss);
    margin += v.margin;
  }
  const double n = static_cast<double>(batch.size());
  return {scale(total, 1.0 / n), margin / n};
}

// ---------------------------------------------------------------------------
// Plain forms

namespace {

struct ConstPair {
  Tape tape;
  TapedPair pair;

  explicit ConstPair(const PairScore& s) {
    pair.chosen = tape.constant(s.chosen_logps);
    pair.rejected = tape.constant(s.rejected_logps);
    pair.chosen_ref = s.chosen_ref_logps ? &*s.chosen_ref_logps : nullptr;
    pair.rejected_ref = s.rejected_ref_logps ? &*s.rejected_ref_logps : nullptr;
    pair.prompt_len = s.prompt_len;
    pair.example_id = s.example_id;
  }
};

template <class F>
double eval_plain(const PairScore& s, F f) {
  ConstPair c(s);
  return f(c.pair).loss.item();
}

std::vector<TapedPair> constant_batch(Tape& tape, std::span<const PairScore> batch) {
  std::vector<TapedPair> out;
  out.reserve(batch.size());
  for (const auto& s : batch) {
    TapedPair p;
    p.chosen = tape.constant(s.chosen_logps);
    p.rejected = tape.constant(s.rejected_logps);
    p.chosen_ref = s.chosen_ref_logps ? &*s.chosen_ref_logps : nullptr;
    p.rejected_ref = s.rejected_ref_logps ? &*s.rejected_ref_logps : nullptr;
    p.prompt_len = s.prompt_len;
    p.example_id = s.example_id;
    out.push_back(p);
  }
  return out;
}

}  // namespace

double d2po_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return d2po_loss(p, cfg); });
}

double d2po_ref_free_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return d2po_ref_free_loss(p, cfg); });
}

double simpo_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return simpo_loss(p, cfg); });
}

double ipo_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return ipo_loss(p, cfg); });
}

double orpo_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return orpo_loss(p, cfg); });
}

double sampo_loss(const PairScore& s, const LossConfig& cfg, std::uint64_t example_id) {
  PairScore copy = s;
  copy.example_id = example_id;
  return eval_plain(copy, [&](const TapedPair& p) { return sampo_loss(p, cfg); });
}

double kto_loss(std::span<const PairScore> batch, const LossConfig& cfg, double z_ref) {
  Tape tape;
  auto pairs = constant_batch(tape, batch);
  return kto_loss(pairs, cfg, z_ref).loss.item();
}

double kto_reference_point(std::span<const PairScore> batch, const LossConfig& cfg) {
  Tape tape;
  auto pairs = constant_batch(tape, batch);
  return kto_reference_point(pairs, cfg);
}

double pair_loss(const PairScore& s, const LossConfig& cfg) {
  return eval_plain(s, [&](const TapedPair& p) { return pair_loss(p, cfg); });
}

double pair_margin(const PairScore& s, const LossConfig& cfg) {
  ConstPair c(s);
  return pair_loss(c.pair, cfg).margin;
}

double batch_loss(std::span<const PairScore> batch, const LossConfig& cfg) {
  Tape tape;
  auto pairs = constant_batch(tape, batch);
  return batch_loss(pairs, cfg).loss.item();
}

double dpo_loss(const PairScore& s, double beta) {
  if (!s.has_reference()) throw std::invalid_argument("dpo_loss requires reference log-probabilities");
  double chosen = 0.0, rejected = 0.0;
  for (std::size_t t = 0; t < s.chosen_len(); ++t)
    chosen += beta * (s.chosen_logps[t] - (*s.chosen_ref_logps)[t]);
  for (std::size_t t = 0; t < s.rejected_len(); ++t)
    rejected += beta * (s.rejected_logps[t] - (*s.rejected_ref_logps)[t]);
  return -logsigmoid(chosen - rejected);
}

}  // namespace decaypo

#pragma once

// Preference objectives over per-token log-probabilities.
//
// Every objective is written once against the tape (so training gets exact
// gradients) and exposed as a plain double-valued function over PairScore.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "decaypo/decay.hpp"
#include "decaypo/tensor.hpp"

namespace decaypo {

enum class LossMethod { D2PO, D2PO_RefFree, SimPO, IPO, KTO, ORPO, SamPO };

std::string to_string(LossMethod m);
/// Accepts the method names plus "dpo" (mapped to D2PO; see LossConfig::dpo).
LossMethod parse_loss_method(std::string_view s);
bool needs_reference(LossMethod m);

struct LossConfig {
  LossMethod method = LossMethod::D2PO;
  double beta = 0.1;
  DecaySchedule schedule{};
  double tau = 0.1;           // IPO
  double lambda_w = 1.0;      // KTO
  double lambda_l = 1.0;      // KTO
  double lambda_orpo = 1.0;   // ORPO odds-ratio weight
  double target_margin = 0.5; // SimPO
  std::uint64_t sampo_seed = 0;

  /// DPO is D2PO with a uniform schedule.
  static LossConfig dpo(double beta = 0.1);

  void validate() const;
};

struct PairScore {
  RealArray chosen_logps;
  RealArray rejected_logps;
  std::optional<RealArray> chosen_ref_logps;
  std::optional<RealArray> rejected_ref_logps;
  int prompt_len = 0;
  std::uint64_t example_id = 0;

  std::size_t chosen_len() const { return chosen_logps.size(); }
  std::size_t rejected_len() const { return rejected_logps.size(); }
  bool has_reference() const { return chosen_ref_logps && rejected_ref_logps; }
  /// Lengths >= 1, reference lengths matching, entries finite and <= 0.
  void validate() const;
  /// Chosen and rejected exchanged.
  PairScore swapped() const;
};

/// A pair whose policy log-probabilities live on a tape.
struct TapedPair {
  Var chosen;
  Var rejected;
  const RealArray* chosen_ref = nullptr;
  const RealArray* rejected_ref = nullptr;
  int prompt_len = 0;
  std::uint64_t example_id = 0;
};

struct LossValue {
  Var loss;
  /// The implicit-reward margin the loss acts on (the argument of -log sigma
  /// for pairwise forms, the IPO gap h, the KTO reward difference, the ORPO
  /// log-odds gap).
  double margin = 0.0;
};

// Tape forms. KTO is batch-level and has no single-pair tape form.
LossValue d2po_loss(const TapedPair& p, const LossConfig& cfg);
LossValue d2po_ref_free_loss(const TapedPair& p, const LossConfig& cfg);
LossValue simpo_loss(const TapedPair& p, const LossConfig& cfg);
LossValue ipo_loss(const TapedPair& p, const LossConfig& cfg);
LossValue orpo_loss(const TapedPair& p, const LossConfig& cfg);
LossValue sampo_loss(const TapedPair& p, const LossConfig& cfg);
LossValue kto_loss(std::span<const TapedPair> batch, const LossConfig& cfg, double z_ref);
/// Per-pair loss for any pairwise method (throws for KTO).
LossValue pair_loss(const TapedPair& p, const LossConfig& cfg);
/// Mean over the batch in index order; KTO estimates its reference point
/// from the batch.
LossValue batch_loss(std::span<const TapedPair> batch, const LossConfig& cfg);

// Plain forms.
double d2po_loss(const PairScore& s, const LossConfig& cfg);
double d2po_ref_free_loss(const PairScore& s, const LossConfig& cfg);
double simpo_loss(const PairScore& s, const LossConfig& cfg);
double ipo_loss(const PairScore& s, const LossConfig& cfg);
double orpo_loss(const PairScore& s, const LossConfig& cfg);
double sampo_loss(const PairScore& s, const LossConfig& cfg, std::uint64_t example_id);
double kto_loss(std::span<const PairScore> batch, const LossConfig& cfg, double z_ref);
double pair_loss(const PairScore& s, const LossConfig& cfg);
double batch_loss(std::span<const PairScore> batch, const LossConfig& cfg);
double pair_margin(const PairScore& s, const LossConfig& cfg);

/// Sequence-level DPO, -log sigma(beta log-ratio_w - beta log-ratio_l),
/// written directly against the sequence log-ratios without any schedule.
double dpo_loss(const PairScore& s, double beta);

/// KTO reference point: batch mean over rejected responses of
/// beta * (sequence log-ratio) / length, clamped at 0. Treated as a constant.
double kto_reference_point(std::span<const PairScore> batch, const LossConfig& cfg);
double kto_reference_point(std::span<const TapedPair> batch, const LossConfig& cfg);

struct SampoSelection {
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> rejected;
};
/// Index sets used by SamPO: all tokens of the shorter response and min(T_w,
/// T_l) indices drawn uniformly without replacement from the longer one
/// (ascending order), seeded by (seed, example_id).
SampoSelection sampo_indices(std::size_t chosen_len, std::size_t rejected_len, std::uint64_t seed,
                             std::uint64_t example_id);

}  // namespace decaypo

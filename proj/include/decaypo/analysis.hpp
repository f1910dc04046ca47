#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "decaypo/data.hpp"
#include "decaypo/losses.hpp"
#include "decaypo/policy_model.hpp"

namespace decaypo {

struct CurvePoint {
  int position = 0;
  double value = 0.0;
  bool operator==(const CurvePoint&) const = default;
};

struct PositionCurve {
  std::vector<CurvePoint> rows;
  /// Free-form "#" comment lines written above the header.
  std::vector<std::string> notes;
  bool operator==(const PositionCurve&) const = default;
};

struct DensityHistogram {
  std::vector<double> centers;
  std::vector<double> density;
  double bin_width = 0.0;
  std::vector<std::string> notes;
  bool operator==(const DensityHistogram&) const = default;
};

struct GapBinRow {
  /// Inclusive lower and exclusive upper gap bound; the overflow row uses
  /// lo = hi = 0 and overflow = true.
  int lo = 0;
  int hi = 0;
  bool overflow = false;
  double mean_loss = 0.0;
  std::size_t count = 0;
  bool operator==(const GapBinRow&) const = default;
};

struct GapTable {
  std::vector<GapBinRow> rows;
  std::vector<std::string> notes;
  bool operator==(const GapTable&) const = default;
};

/// KL(policy || reference) of the next-token distributions at each response
/// position, averaged over the samples long enough to reach it.
PositionCurve kl_per_position(const PolicyModel& policy, const PolicyModel& reference,
                              const std::vector<TokenSequence>& samples, int max_pos);

/// Number of samples whose response reaches each position < max_pos.
std::vector<std::size_t> survivor_counts(const std::vector<TokenSequence>& samples, int max_pos);

/// Equal-width histogram over [min, max] of the reference margins
/// log pi_ref(chosen) - log pi_ref(rejected), normalized to a density.
DensityHistogram ref_margin_density(const PolicyModel& reference,
                                    const std::vector<PreferencePair>& pairs, int bins);
std::vector<double> reference_margins(const PolicyModel& reference,
                                      const std::vector<PreferencePair>& pairs);
DensityHistogram density_histogram(const std::vector<double>& values, int bins);

/// Mean realized next-token probability at each response position.
PositionCurve prob_per_position(const PolicyModel& model, const std::vector<TokenSequence>& samples,
                                int max_pos);

/// Mean per-pair loss grouped by length gap T_w - T_l. gap_bins are
/// increasing boundaries b_0 < ... < b_k defining bins [b_i, b_{i+1});
/// gaps outside all bins land in a trailing overflow row.
GapTable loss_by_length_gap(const LossConfig& cfg, const std::vector<PairScore>& scored,
                            const std::vector<int>& gap_bins);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

std::string to_csv(const PositionCurve& c);
std::string to_csv(const DensityHistogram& h);
std::string to_csv(const GapTable& t);
PositionCurve position_curve_from_csv(std::string_view text);
DensityHistogram histogram_from_csv(std::string_view text);
GapTable gap_table_from_csv(std::string_view text);

}  // namespace decaypo

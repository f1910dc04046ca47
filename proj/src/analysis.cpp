#include "decaypo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace decaypo {

namespace {

std::vector<double> log_softmax_row(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  const double lse = m + std::log(s);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - lse;
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int capped_len(const TokenSequence& s, int max_pos) {
  return std::min(static_cast<int>(s.response_len()), max_pos);
}

PositionCurve survivor_mean(const std::vector<double>& sums, const std::vector<std::size_t>& counts) {
  PositionCurve curve;
  for (std::size_t p = 0; p < sums.size(); ++p) {
    if (counts[p] == 0) continue;
    curve.rows.push_back({static_cast<int>(p), sums[p] / static_cast<double>(counts[p])});
  }
  return curve;
}

// Splits CSV text into comment lines (without "# "), and data rows.
struct CsvText {
  std::vector<std::string> comments;
  std::vector<std::vector<std::string>> rows;
};

CsvText split_csv(std::string_view text, std::string_view header) {
  CsvText out;
  std::istringstream in{std::string(text)};
  std::string line;
  bool seen_header = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      out.comments.push_back(line.size() > 2 ? line.substr(2) : "");
      continue;
    }
    if (!seen_header) {
      if (line != header) throw ParseError(line_no, "expected header '" + std::string(header) + "'");
      seen_header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    out.rows.push_back(std::move(cells));
  }
  if (!seen_header) throw ParseError(line_no, "missing header '" + std::string(header) + "'");
  return out;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}

}  // namespace

std::vector<std::size_t> survivor_counts(const std::vector<TokenSequence>& samples, int max_pos) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(max_pos, 0)), 0);
  for (const auto& s : samples) {
    for (int p = 0; p < capped_len(s, max_pos); ++p) ++counts[static_cast<std::size_t>(p)];
  }
  return counts;
}

PositionCurve kl_per_position(const PolicyModel& policy, const PolicyModel& reference,
                              const std::vector<TokenSequence>& samples, int max_pos) {
  if (samples.empty()) throw std::invalid_argument("kl_per_position: empty sample set");
  if (policy.vocab_size() != reference.vocab_size() || policy.context() != reference.context()) {
    throw std::invalid_argument("kl_per_position: models differ in vocabulary or context");
  }
  const auto n = static_cast<std::size_t>(std::max(max_pos, 0));
  std::vector<double> sums(n, 0.0);
  std::vector<std::size_t> counts(n, 0);
  for (const auto& s : samples) {
    const RealArray lp = policy.response_logits(s);
    const RealArray lr = reference.response_logits(s);
    for (int p = 0; p < capped_len(s, max_pos); ++p) {
      const auto a = log_softmax_row(lp.row(static_cast<std::size_t>(p)));
      const auto b = log_softmax_row(lr.row(static_cast<std::size_t>(p)));
      double kl = 0.0;
      for (std::size_t v = 0; v < a.size(); ++v) kl += std::exp(a[v]) * (a[v] - b[v]);
      sums[static_cast<std::size_t>(p)] += std::max(kl, 0.0);
      ++counts[static_cast<std::size_t>(p)];
    }
  }
  PositionCurve curve = survivor_mean(sums, counts);
  curve.notes = {"kl direction: KL(policy || reference) of next-token distributions",
                 "aggregation: mean over samples whose response reaches the position"};
  return curve;
}

PositionCurve prob_per_position(const PolicyModel& model, const std::vector<TokenSequence>& samples,
                                int max_pos) {
  if (samples.empty()) throw std::invalid_argument("prob_per_position: empty sample set");
  const auto n = static_cast<std::size_t>(std::max(max_pos, 0));
  std::vector<double> sums(n, 0.0);
  std::vector<std::size_t> counts(n, 0);
  for (const auto& s : samples) {
    const RealArray lp = model.token_logprobs(s);
    for (int p = 0; p < capped_len(s, max_pos); ++p) {
      sums[static_cast<std::size_t>(p)] += std::exp(lp[static_cast<std::size_t>(p)]);
      ++counts[static_cast<std::size_t>(p)];
    }
  }
  PositionCurve curve = survivor_mean(sums, counts);
  curve.notes = {"value: mean realized next-token probability",
                 "aggregation: mean over samples whose response reaches the position"};
  return curve;
}

std::vector<double> reference_margins(const PolicyModel& reference,
                                      const std::vector<PreferencePair>& pairs) {
  std::vector<double> margins;
  margins.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto prompt = Vocabulary::encode_prompt(p.prompt);
    auto seq_logprob = [&](const std::string& response) {
      const RealArray lp = reference.token_logprobs({prompt, Vocabulary::encode_response(response)});
      double s = 0.0;
      for (double v : lp.values()) s += v;
      return s;
    };
    margins.push_back(seq_logprob(p.chosen) - seq_logprob(p.rejected));
  }
  return margins;
}

DensityHistogram density_histogram(const std::vector<double>& values, int bins) {
  if (bins < 2) throw std::invalid_argument("histogram needs at least 2 bins");
  if (values.empty()) throw std::invalid_argument("histogram of an empty sample");
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi == lo) {
    // Degenerate sample: a unit-wide range centred on the single value.
    lo -= 0.5;
    hi += 0.5;
  }
  DensityHistogram h;
  h.bin_width = (hi - lo) / bins;
  std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
  for (double v : values) {
    auto b = static_cast<std::ptrdiff_t>(std::floor((v - lo) / h.bin_width));
    b = std::clamp<std::ptrdiff_t>(b, 0, bins - 1);
    ++counts[static_cast<std::size_t>(b)];
  }
  const double n = static_cast<double>(values.size());
  for (int b = 0; b < bins; ++b) {
    h.centers.push_back(lo + (b + 0.5) * h.bin_width);
    h.density.push_back(static_cast<double>(counts[static_cast<std::size_t>(b)]) / (n * h.bin_width));
  }
  h.notes = {"binning: equal-width bins over [min, max] of observed values"};
  return h;
}

DensityHistogram ref_margin_density(const PolicyModel& reference,
                                    const std::vector<PreferencePair>& pairs, int bins) {
  if (pairs.empty()) throw std::invalid_argument("ref_margin_density: empty pair list");
  if (bins < 2) throw std::invalid_argument("ref_margin_density: bins must be >= 2");
  DensityHistogram h = density_histogram(reference_margins(reference, pairs), bins);
  h.notes.insert(h.notes.begin(), "value: log pi_ref(chosen) - log pi_ref(rejected)");
  return h;
}

GapTable loss_by_length_gap(const LossConfig& cfg, const std::vector<PairScore>& scored,
                            const std::vector<int>& gap_bins) {
  if (gap_bins.size() < 2) throw std::invalid_argument("loss_by_length_gap: need >= 2 bin boundaries");
  if (!std::is_sorted(gap_bins.begin(), gap_bins.end()) ||
      std::adjacent_find(gap_bins.begin(), gap_bins.end()) != gap_bins.end()) {
    throw std::invalid_argument("loss_by_length_gap: bin boundaries must be strictly increasing");
  }
  const std::size_t nbins = gap_bins.size() - 1;
  std::vector<double> sums(nbins + 1, 0.0);
  std::vector<std::size_t> counts(nbins + 1, 0);
  for (const auto& s : scored) {
    const int gap = static_cast<int>(s.chosen_len()) - static_cast<int>(s.rejected_len());
    std::size_t bin = nbins;
    for (std::size_t b = 0; b < nbins; ++b) {
      if (gap >= gap_bins[b] && gap < gap_bins[b + 1]) {
        bin = b;
        break;
      }
    }
    sums[bin] += pair_loss(s, cfg);
    ++counts[bin];
  }
  GapTable t;
  for (std::size_t b = 0; b <= nbins; ++b) {
    GapBinRow row;
    if (b < nbins) {
      row.lo = gap_bins[b];
      row.hi = gap_bins[b + 1];
    } else {
      row.overflow = true;
    }
    row.count = counts[b];
    row.mean_loss = counts[b] ? sums[b] / static_cast<double>(counts[b]) : 0.0;
    t.rows.push_back(row);
  }
  t.notes = {"loss: " + to_string(cfg.method) + " beta=" + fmt(cfg.beta) + " schedule=" +
             to_string(cfg.schedule.kind) + " gamma=" + fmt(cfg.schedule.gamma) + " origin=" +
             to_string(cfg.schedule.origin),
             "gap: chosen length minus rejected length, bins [lo, hi)"};
  return t;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need >= 2 paired values");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// CSV

std::string to_csv(const PositionCurve& c) {
  std::string out;
  for (const auto& n : c.notes) out += "# " + n + "\n";
  out += "position,value\n";
  for (const auto& r : c.rows) out += std::to_string(r.position) + "," + fmt(r.value) + "\n";
  return out;
}

std::string to_csv(const DensityHistogram& h) {
  std::string out;
  for (const auto& n : h.notes) out += "# " + n + "\n";
  out += "# bin_width=" + fmt(h.bin_width) + "\n";
  out += "value,density\n";
  for (std::size_t i = 0; i < h.centers.size(); ++i) out += fmt(h.centers[i]) + "," + fmt(h.density[i]) + "\n";
  return out;
}

std::string to_csv(const GapTable& t) {
  std::string out;
  for (const auto& n : t.notes) out += "# " + n + "\n";
  out += "gap_lo,gap_hi,mean_loss,count\n";
  for (const auto& r : t.rows) {
    if (r.overflow) {
      out += "overflow,overflow,";
    } else {
      out += std::to_string(r.lo) + "," + std::to_string(r.hi) + ",";
    }
    out += fmt(r.mean_loss) + "," + std::to_string(r.count) + "\n";
  }
  return out;
}

PositionCurve position_curve_from_csv(std::string_view text) {
  const CsvText csv = split_csv(text, "position,value");
  PositionCurve c;
  c.notes = csv.comments;
  for (const auto& r : csv.rows) {
    if (r.size() != 2) throw std::invalid_argument("position curve rows have 2 columns");
    c.rows.push_back({std::stoi(r[0]), to_double(r[1])});
  }
  return c;
}

DensityHistogram histogram_from_csv(std::string_view text) {
  const CsvText csv = split_csv(text, "value,density");
  DensityHistogram h;
  for (const auto& c : csv.comments) {
    if (c.starts_with("bin_width=")) {
      h.bin_width = to_double(c.substr(10));
    } else {
      h.notes.push_back(c);
    }
  }
  for (const auto& r : csv.rows) {
    if (r.size() != 2) throw std::invalid_argument("histogram rows have 2 columns");
    h.centers.push_back(to_double(r[0]));
    h.density.push_back(to_double(r[1]));
  }
  return h;
}

GapTable gap_table_from_csv(std::string_view text) {
  const CsvText csv = split_csv(text, "gap_lo,gap_hi,mean_loss,count");
  GapTable t;
  t.notes = csv.comments;
  for (const auto& r : csv.rows) {
    if (r.size() != 4) throw std::invalid_argument("gap table rows have 4 columns");
    GapBinRow row;
    if (r[0] == "overflow") {
      row.overflow = true;
    } else {
      row.lo = std::stoi(r[0]);
      row.hi = std::stoi(r[1]);
    }
    row.mean_loss = to_double(r[2]);
    row.count = static_cast<std::size_t>(std::stoull(r[3]));
    t.rows.push_back(row);
  }
  return t;
}

}  // namespace decaypo

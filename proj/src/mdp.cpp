#include "decaypo/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "decaypo/rng.hpp"

namespace decaypo {

namespace {

constexpr double kRowTolerance = 1e-12;

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_gamma(double gamma) {
  require(std::isfinite(gamma) && gamma >= 0.0 && gamma <= 1.0, "gamma must lie in [0, 1]");
}

void check_state(const TabularMDP& mdp, int s) {
  require(s >= 0 && s < mdp.S, "state " + std::to_string(s) + " out of range");
}

/// Expected next-step value sum_{s'} P[s][a][s'] V[s'].
double expected_next(const TabularMDP& mdp, int s, int a, const double* next_v) {
  double e = 0.0;
  for (int n = 0; n < mdp.S; ++n) e += mdp.p(s, a, n) * next_v[n];
  return e;
}

/// V_t(s) for t = 0..H of a fixed policy under the given discount.
std::vector<double> evaluate(const TabularMDP& mdp, const PolicyTable& pi, double gamma) {
  std::vector<double> V(static_cast<std::size_t>(mdp.H + 1) * mdp.S, 0.0);
  for (int t = mdp.H - 1; t >= 0; --t) {
    const double* next = &V[static_cast<std::size_t>(t + 1) * mdp.S];
    for (int s = 0; s < mdp.S; ++s) {
      double v = 0.0;
      for (int a = 0; a < mdp.A; ++a) {
        const double p = pi.at(t, s, a);
        if (p == 0.0) continue;
        v += p * (mdp.reward(s, a) + gamma * expected_next(mdp, s, a, next));
      }
      V[static_cast<std::size_t>(t) * mdp.S + s] = v;
    }
  }
  return V;
}

}  // namespace

// ---------------------------------------------------------------------------
// TabularMDP

void TabularMDP::validate() const {
  require(S >= 1 && A >= 1, "MDP needs at least one state and one action");
  require(H >= 0, "horizon must be >= 0");
  require(std::isfinite(R) && R > 0.0, "reward bound R must be positive");
  require(s0 >= 0 && s0 < S, "initial state out of range");
  const auto sa = static_cast<std::size_t>(S) * A;
  require(P.size() == sa * S, "transition tensor has the wrong size");
  require(r.size() == sa, "reward table has the wrong size");
  for (std::size_t i = 0; i < sa; ++i) {
    double sum = 0.0;
    for (int n = 0; n < S; ++n) {
      const double p = P[i * S + n];
      require(std::isfinite(p) && p >= 0.0, "transition probabilities must be finite and >= 0");
      sum += p;
    }
    require(std::abs(sum - 1.0) <= kRowTolerance, "transition row does not sum to 1");
    require(std::isfinite(r[i]) && std::abs(r[i]) <= R, "reward exceeds the bound R");
  }
}

TabularMDP random_mdp(int S, int A, int H, double R, std::uint64_t seed, TransitionKind kind) {
  require(S >= 1 && A >= 1 && H >= 1, "random_mdp needs S, A, H >= 1");
  require(std::isfinite(R) && R > 0.0, "random_mdp needs R > 0");
  Rng rng(seed);
  TabularMDP m;
  m.S = S;
  m.A = A;
  m.H = H;
  m.R = R;
  const auto sa = static_cast<std::size_t>(S) * A;
  m.P.assign(sa * S, 0.0);
  m.r.resize(sa);
  for (std::size_t i = 0; i < sa; ++i) {
    double* row = &m.P[i * S];
    if (kind == TransitionKind::Deterministic) {
      row[rng.below(static_cast<std::uint64_t>(S))] = 1.0;
    } else {
      // Dirichlet(1): normalized independent Exponential(1) draws.
      double sum = 0.0;
      for (int n = 0; n < S; ++n) sum += (row[n] = rng.exponential());
      for (int n = 0; n < S; ++n) row[n] /= sum;
      // Put any rounding residue on the largest entry so the row sums to 1.
      double total = 0.0;
      for (int n = 0; n < S; ++n) total += row[n];
      *std::max_element(row, row + S) += 1.0 - total;
    }
    m.r[i] = rng.uniform(-R, R);
  }
  return m;
}

// ---------------------------------------------------------------------------
// PolicyTable

PolicyTable::PolicyTable(int H, int S, int A) : H_(H), S_(S), A_(A) {
  require(H >= 0 && S >= 1 && A >= 1, "invalid policy table shape");
  probs_.assign(static_cast<std::size_t>(H) * S * A, 0.0);
}

PolicyTable PolicyTable::uniform(int H, int S, int A) {
  PolicyTable p(H, S, A);
  std::fill(p.probs_.begin(), p.probs_.end(), 1.0 / A);
  return p;
}

void PolicyTable::validate(const TabularMDP& mdp) const {
  require(H_ == mdp.H && S_ == mdp.S && A_ == mdp.A, "policy table shape does not match the MDP");
  for (int t = 0; t < H_; ++t) {
    for (int s = 0; s < S_; ++s) {
      double sum = 0.0;
      for (int a = 0; a < A_; ++a) {
        const double p = at(t, s, a);
        require(std::isfinite(p) && p >= 0.0, "policy probabilities must be finite and >= 0");
        sum += p;
      }
      require(std::abs(sum - 1.0) <= kRowTolerance,
              "policy row (t=" + std::to_string(t) + ", s=" + std::to_string(s) + ") does not sum to 1");
    }
  }
}

// ---------------------------------------------------------------------------
// Soft value iteration

SoftSolution soft_value_iteration(const TabularMDP& mdp, const PolicyTable& pi_ref, double beta,
                                  double gamma) {
  mdp.validate();
  pi_ref.validate(mdp);
  require(std::isfinite(beta) && beta > 0.0, "beta must be positive");
  check_gamma(gamma);
  const int H = mdp.H, S = mdp.S, A = mdp.A;
  for (int t = 0; t < H; ++t)
    for (int s = 0; s < S; ++s)
      for (int a = 0; a < A; ++a)
        if (pi_ref.at(t, s, a) == 0.0) {
          throw SupportMismatchError("pi_ref(a=" + std::to_string(a) + " | s=" + std::to_string(s) +
                                     ", t=" + std::to_string(t) +
                                     ") is zero; beta * log pi_ref is -inf");
        }

  SoftSolution sol;
  ValueTable& vt = sol.values;
  vt.H = H;
  vt.S = S;
  vt.A = A;
  vt.V.assign(static_cast<std::size_t>(H + 1) * S, 0.0);
  vt.Q.assign(static_cast<std::size_t>(H) * S * A, 0.0);
  sol.policy = PolicyTable(H, S, A);

  for (int t = H - 1; t >= 0; --t) {
    const double* next = &vt.V[static_cast<std::size_t>(t + 1) * S];
    for (int s = 0; s < S; ++s) {
      double* q = &vt.Q[(static_cast<std::size_t>(t) * S + s) * A];
      for (int a = 0; a < A; ++a) {
        q[a] = mdp.reward(s, a) + beta * std::log(pi_ref.at(t, s, a));
        if (gamma != 0.0) q[a] += gamma * expected_next(mdp, s, a, next);
      }
      const double m = *std::max_element(q, q + A);
      double z = 0.0;
      for (int a = 0; a < A; ++a) z += std::exp((q[a] - m) / beta);
      const double v = m + beta * std::log(z);
      vt.V[static_cast<std::size_t>(t) * S + s] = v;
      // Normalizing by the same sum keeps each row at 1 up to rounding.
      double total = 0.0;
      for (int a = 0; a < A; ++a) total += (sol.policy.at(t, s, a) = std::exp((q[a] - m) / beta) / z);
      if (std::abs(total - 1.0) > kRowTolerance) {
        for (int a = 0; a < A; ++a) sol.policy.at(t, s, a) /= total;
      }
    }
  }
  return sol;
}

TrajectoryIdentity trajectory_identity_check(const TabularMDP& mdp, const PolicyTable& pi_ref,
                                             double beta, double gamma,
                                             const std::vector<std::pair<int, int>>& trajectory) {
  require(!trajectory.empty(), "trajectory is empty");
  require(static_cast<int>(trajectory.size()) <= mdp.H, "trajectory is longer than the horizon");
  require(trajectory.front().first == mdp.s0, "trajectory must start at s0");
  for (std::size_t t = 0; t < trajectory.size(); ++t) {
    const auto [s, a] = trajectory[t];
    check_state(mdp, s);
    require(a >= 0 && a < mdp.A, "action out of range at step " + std::to_string(t));
    if (t + 1 < trajectory.size()) {
      require(mdp.p(s, a, trajectory[t + 1].first) > 0.0,
              "transition at step " + std::to_string(t) + " has zero probability");
    }
  }
  const SoftSolution sol = soft_value_iteration(mdp, pi_ref, beta, gamma);
  TrajectoryIdentity out;
  out.rhs = sol.values.v(0, mdp.s0);
  double discount = 1.0;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    const int t = static_cast<int>(i);
    const auto [s, a] = trajectory[i];
    out.lhs += discount * mdp.reward(s, a);
    // log pi* = (Q - V) / beta exactly, avoiding a round trip through exp.
    const double log_pi_star = (sol.values.q(t, s, a) - sol.values.v(t, s)) / beta;
    out.rhs += discount * beta * (log_pi_star - std::log(pi_ref.at(t, s, a)));
    discount *= gamma;
  }
  out.residual = std::abs(out.lhs - out.rhs);
  return out;
}

double policy_value(const TabularMDP& mdp, const PolicyTable& pi, double gamma, int s) {
  check_gamma(gamma);
  check_state(mdp, s);
  if (mdp.H == 0) return 0.0;
  pi.validate(mdp);
  return evaluate(mdp, pi, gamma)[static_cast<std::size_t>(s)];
}

// ---------------------------------------------------------------------------
// Suboptimality

SuboptimalityReport suboptimality_decompose(const TabularMDP& mdp, const PolicyTable& pi_star,
                                            const PolicyTable& pi, double gamma, int s) {
  SuboptimalityReport rep;
  rep.gamma = gamma;
  const double v1_star = policy_value(mdp, pi_star, 1.0, s);
  const double vg_star = policy_value(mdp, pi_star, gamma, s);
  const double vg_pi = policy_value(mdp, pi, gamma, s);
  const double v1_pi = policy_value(mdp, pi, 1.0, s);
  rep.delta1 = v1_star - vg_star;
  rep.delta2 = vg_star - vg_pi;
  rep.delta3 = vg_pi - v1_pi;
  rep.subopt = v1_star - v1_pi;
  return rep;
}

double occupancy_tv(const TabularMDP& mdp, const PolicyTable& pi_star, const PolicyTable& pi) {
  if (mdp.H == 0) return 0.0;
  pi_star.validate(mdp);
  pi.validate(mdp);
  std::vector<double> d(static_cast<std::size_t>(mdp.S), 0.0), next(d.size());
  d[static_cast<std::size_t>(mdp.s0)] = 1.0;
  double total = 0.0;
  for (int t = 0; t < mdp.H; ++t) {
    std::fill(next.begin(), next.end(), 0.0);
    for (int s = 0; s < mdp.S; ++s) {
      const double ds = d[static_cast<std::size_t>(s)];
      if (ds == 0.0) continue;
      double tv = 0.0;
      for (int a = 0; a < mdp.A; ++a) {
        tv += std::abs(pi_star.at(t, s, a) - pi.at(t, s, a));
        const double pa = ds * pi_star.at(t, s, a);
        if (pa == 0.0) continue;
        for (int n = 0; n < mdp.S; ++n) next[static_cast<std::size_t>(n)] += pa * mdp.p(s, a, n);
      }
      total += ds * 0.5 * tv;
    }
    d.swap(next);
  }
  return std::clamp(total / mdp.H, 0.0, 1.0);
}

double effective_horizon(int H, double gamma) {
  double g = 0.0, power = 1.0;
  for (int t = 0; t < H; ++t) {
    g += power;
    power *= gamma;
  }
  return g;
}

SuboptimalityReport theorem1_bound(int H, double R, double gamma, double tv) {
  check_gamma(gamma);
  SuboptimalityReport rep;
  rep.gamma = gamma;
  rep.tv_expectation = tv;
  const double G = effective_horizon(H, gamma);
  rep.bound_term1 = 2.0 * (H - G) * R;
  rep.bound_term2 = 2.0 * G * G * tv * R;
  rep.bound_total = rep.bound_term1 + rep.bound_term2;
  return rep;
}

SuboptimalityReport theorem1_bound(const TabularMDP& mdp, const PolicyTable& pi_star,
                                   const PolicyTable& pi, double gamma) {
  return theorem1_bound(mdp.H, mdp.R, gamma, occupancy_tv(mdp, pi_star, pi));
}

SuboptimalityReport suboptimality_report(const TabularMDP& mdp, const PolicyTable& pi_star,
                                         const PolicyTable& pi, double gamma) {
  SuboptimalityReport rep = theorem1_bound(mdp, pi_star, pi, gamma);
  const SuboptimalityReport d = suboptimality_decompose(mdp, pi_star, pi, gamma, mdp.s0);
  rep.delta1 = d.delta1;
  rep.delta2 = d.delta2;
  rep.delta3 = d.delta3;
  rep.subopt = d.subopt;
  return rep;
}

std::vector<BoundSweepRow> theorem1_sweep(std::uint64_t root_seed, int seeds,
                                          const std::vector<double>& gammas,
                                          const BoundSweepOptions& opts) {
  require(seeds >= 0, "seed count must be >= 0");
  require(opts.max_states >= 1 && opts.max_actions >= 1 && opts.max_horizon >= 1,
          "sweep size limits must be >= 1");
  for (double g : gammas) {
    require(g > 0.0 && g <= 1.0, "sweep gammas must lie in (0, 1]");
  }
  std::vector<BoundSweepRow> rows;
  rows.reserve(static_cast<std::size_t>(seeds) * gammas.size());
  const std::uint64_t base = substream(root_seed, "mdp");
  for (int i = 0; i < seeds; ++i) {
    const auto seed = static_cast<std::uint64_t>(i);
    Rng sizes(substream(substream(base, "sizes"), seed));
    const int S = 1 + static_cast<int>(sizes.below(static_cast<std::uint64_t>(opts.max_states)));
    const int A = 1 + static_cast<int>(sizes.below(static_cast<std::uint64_t>(opts.max_actions)));
    const int H = 1 + static_cast<int>(sizes.below(static_cast<std::uint64_t>(opts.max_horizon)));
    const TabularMDP mdp = random_mdp(S, A, H, opts.R, substream(base, seed));
    const PolicyTable ref = PolicyTable::uniform(H, S, A);
    const PolicyTable pi_star = soft_value_iteration(mdp, ref, opts.beta, 1.0).policy;
    for (double g : gammas) {
      const PolicyTable pi = soft_value_iteration(mdp, ref, opts.beta, g).policy;
      BoundSweepRow row;
      row.seed = seed;
      row.report = suboptimality_report(mdp, pi_star, pi, g);
      row.holds = row.report.subopt <= row.report.bound_total;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace decaypo

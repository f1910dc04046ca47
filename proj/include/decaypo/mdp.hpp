#pragma once

// Finite-horizon tabular MDPs: decayed soft value iteration, the Boltzmann
// optimal policy, the trajectory reward identity, and the suboptimality
// decomposition with its discount-factor bound.
//
// Policies are indexed by timestep because finite-horizon optimality is
// nonstationary.

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

namespace decaypo {

/// pi_ref gives zero probability to an action, so beta * log pi_ref = -inf.
class SupportMismatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TabularMDP {
  int S = 1;
  int A = 1;
  int H = 1;
  double R = 1.0;
  int s0 = 0;
  /// P[(s * A + a) * S + s'].
  std::vector<double> P;
  /// r[s * A + a].
  std::vector<double> r;

  double p(int s, int a, int next) const { return P[(static_cast<std::size_t>(s) * A + a) * S + next]; }
  double reward(int s, int a) const { return r[static_cast<std::size_t>(s) * A + a]; }
  /// Throws std::invalid_argument naming the violated invariant.
  void validate() const;
  bool operator==(const TabularMDP&) const = default;
};

enum class TransitionKind {
  /// Each P[s][a] drawn from a symmetric Dirichlet(1).
  Dirichlet,
  /// Each P[s][a] is a point mass on a uniformly drawn next state, as in
  /// token-level language modelling where the next state is the extended
  /// prefix.
  Deterministic,
};

TabularMDP random_mdp(int S, int A, int H, double R, std::uint64_t seed,
                      TransitionKind kind = TransitionKind::Dirichlet);

class PolicyTable {
 public:
  PolicyTable() = default;
  PolicyTable(int H, int S, int A);
  static PolicyTable uniform(int H, int S, int A);

  int H() const { return H_; }
  int S() const { return S_; }
  int A() const { return A_; }
  double& at(int t, int s, int a) { return probs_[index(t, s, a)]; }
  double at(int t, int s, int a) const { return probs_[index(t, s, a)]; }
  /// Rows are nonnegative and sum to 1 within 1e-12; shape matches the MDP.
  void validate(const TabularMDP& mdp) const;
  bool operator==(const PolicyTable&) const = default;

 private:
  std::size_t index(int t, int s, int a) const {
    return (static_cast<std::size_t>(t) * S_ + s) * A_ + a;
  }
  int H_ = 0, S_ = 0, A_ = 0;
  std::vector<double> probs_;
};

struct ValueTable {
  int H = 0, S = 0, A = 0;
  /// V[t * S + s] for t <= H; V[H][.] = 0.
  std::vector<double> V;
  /// Q[(t * S + s) * A + a] for t < H.
  std::vector<double> Q;

  double v(int t, int s) const { return V[static_cast<std::size_t>(t) * S + s]; }
  double q(int t, int s, int a) const { return Q[(static_cast<std::size_t>(t) * S + s) * A + a]; }
};

struct SoftSolution {
  ValueTable values;
  PolicyTable policy;
};

/// Backward induction from t = H-1:
///   Q = r + beta log pi_ref + gamma E[V'],  V = beta logsumexp(Q / beta),
///   pi* = exp((Q - V) / beta).
SoftSolution soft_value_iteration(const TabularMDP& mdp, const PolicyTable& pi_ref, double beta,
                                  double gamma);

struct TrajectoryIdentity {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
};

/// lhs = sum_t gamma^t r(s_t, a_t);
/// rhs = V*(s_0) + sum_t gamma^t beta log(pi*(a_t|s_t,t) / pi_ref(a_t|s_t,t)).
/// The trajectory starts at s0; consecutive states must be reachable.
TrajectoryIdentity trajectory_identity_check(const TabularMDP& mdp, const PolicyTable& pi_ref,
                                             double beta, double gamma,
                                             const std::vector<std::pair<int, int>>& trajectory);

/// Exact expected decayed return E[sum_{t<H} gamma^t r | s_0 = s].
double policy_value(const TabularMDP& mdp, const PolicyTable& pi, double gamma, int s);

struct SuboptimalityReport {
  double gamma = 0.0;
  double gamma_e = 1.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  double subopt = 0.0;
  double bound_term1 = 0.0;
  double bound_term2 = 0.0;
  double bound_total = 0.0;
  double tv_expectation = 0.0;
};

/// Fills gamma and the deltas:
///   delta1 = V_1^{pi*} - V_gamma^{pi*}, delta2 = V_gamma^{pi*} - V_gamma^{pi},
///   delta3 = V_gamma^{pi} - V_1^{pi},   subopt = V_1^{pi*} - V_1^{pi}.
SuboptimalityReport suboptimality_decompose(const TabularMDP& mdp, const PolicyTable& pi_star,
                                            const PolicyTable& pi, double gamma, int s);

/// Expected total variation between pi* and pi under pi*'s state visitation
/// from s0, averaged uniformly over timesteps 0..H-1 without discount.
double occupancy_tv(const TabularMDP& mdp, const PolicyTable& pi_star, const PolicyTable& pi);

/// sum_{t<H} gamma^t, computed by summation so gamma = 1 gives H exactly.
double effective_horizon(int H, double gamma);

/// Fills gamma, tv_expectation and the bound fields:
///   term1 = 2 (H - G) R, term2 = 2 G^2 tv R, G = effective_horizon(H, gamma).
SuboptimalityReport theorem1_bound(const TabularMDP& mdp, const PolicyTable& pi_star,
                                   const PolicyTable& pi, double gamma);
/// Bound fields for an explicit tv value.
SuboptimalityReport theorem1_bound(int H, double R, double gamma, double tv);

/// Both halves for one (pi*, pi, gamma) triple evaluated at s0.
SuboptimalityReport suboptimality_report(const TabularMDP& mdp, const PolicyTable& pi_star,
                                         const PolicyTable& pi, double gamma);

struct BoundSweepRow {
  std::uint64_t seed = 0;
  SuboptimalityReport report;
  bool holds = false;
};

struct BoundSweepOptions {
  int max_states = 5;
  int max_actions = 5;
  int max_horizon = 10;
  double R = 1.0;
  double beta = 0.1;
};

/// For each seed a random MDP (sizes drawn from the seed) with uniform
/// pi_ref; pi* is soft-optimal at gamma_e = 1 and pi soft-optimal at each
/// gamma. Rows are ordered by (seed, gamma).
std::vector<BoundSweepRow> theorem1_sweep(std::uint64_t root_seed, int seeds,
                                          const std::vector<double>& gammas,
                                          const BoundSweepOptions& opts = {});

}  // namespace decaypo

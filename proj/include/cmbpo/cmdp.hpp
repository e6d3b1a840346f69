#pragma once

// Finite constrained MDPs and their exact quantities: discounted state
// distributions, returns, values, advantages and divergences. Everything here
// is computed by dense linear algebra and serves as ground truth for the
// sample-based parts of the library.

#include "cmbpo/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace cmbpo {

inline constexpr double kConstructionTol = 1e-12;
inline constexpr double kSolverResidualTol = 1e-8;

/// Dense tensor indexed [s][a][s'], stored row-major so that each (s, a)
/// slice is contiguous.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(Index n_states, Index n_actions, double fill = 0.0)
      : n_states_(n_states),
        n_actions_(n_actions),
        data_(static_cast<std::size_t>(n_states * n_actions * n_states), fill) {}

  Index n_states() const { return n_states_; }
  Index n_actions() const { return n_actions_; }

  double& operator()(Index s, Index a, Index s2) { return data_[offset(s, a) + static_cast<std::size_t>(s2)]; }
  double operator()(Index s, Index a, Index s2) const {
    return data_[offset(s, a) + static_cast<std::size_t>(s2)];
  }

  Eigen::Map<Vector> row(Index s, Index a) { return {data_.data() + offset(s, a), n_states_}; }
  Eigen::Map<const Vector> row(Index s, Index a) const {
    return {data_.data() + offset(s, a), n_states_};
  }

  bool same_shape(const Tensor3& o) const {
    return n_states_ == o.n_states_ && n_actions_ == o.n_actions_;
  }

  const std::vector<double>& data() const { return data_; }

 private:
  std::size_t offset(Index s, Index a) const {
    return static_cast<std::size_t>((s * n_actions_ + a) * n_states_);
  }

  Index n_states_ = 0;
  Index n_actions_ = 0;
  std::vector<double> data_;
};

inline bool is_distribution(const Eigen::Ref<const Vector>& p, double tol) {
  if (p.size() == 0) return false;
  if ((p.array() < 0.0).any() || !p.allFinite()) return false;
  return std::abs(p.sum() - 1.0) <= tol;
}

inline void validate_kernel(const Tensor3& kernel, double tol = kConstructionTol) {
  for (Index s = 0; s < kernel.n_states(); ++s)
    for (Index a = 0; a < kernel.n_actions(); ++a)
      if (!is_distribution(kernel.row(s, a), tol))
        throw InvalidArgument("transition row (" + std::to_string(s) + "," + std::to_string(a) +
                              ") is not a probability distribution");
}

/// Selects which per-transition signal a computation uses.
struct Signal {
  enum class Kind { Reward, Cost };
  Kind kind = Kind::Reward;
  int cost_index = 0;

  static Signal reward() { return {}; }
  static Signal cost(int i) { return {Kind::Cost, i}; }
  std::string name() const {
    return kind == Kind::Reward ? "reward" : "cost" + std::to_string(cost_index);
  }
};

/// Stochastic policy table pi[s][a]; each row is a distribution.
class PolicyTable {
 public:
  PolicyTable() = default;
  explicit PolicyTable(Matrix probs) : probs_(std::move(probs)) {
    require(probs_.rows() > 0 && probs_.cols() > 0, "policy table must be non-empty");
    for (Index s = 0; s < probs_.rows(); ++s)
      if (!is_distribution(probs_.row(s).transpose(), kConstructionTol))
        throw InvalidArgument("policy row " + std::to_string(s) + " is not a distribution");
  }

  static PolicyTable uniform(Index n_states, Index n_actions) {
    return PolicyTable(Matrix::Constant(n_states, n_actions, 1.0 / static_cast<double>(n_actions)));
  }
  /// Deterministic policy from one action per state.
  static PolicyTable deterministic(const std::vector<int>& actions, Index n_actions) {
    Matrix p = Matrix::Zero(static_cast<Index>(actions.size()), n_actions);
    for (std::size_t s = 0; s < actions.size(); ++s) p(static_cast<Index>(s), actions[s]) = 1.0;
    return PolicyTable(std::move(p));
  }

  Index n_states() const { return probs_.rows(); }
  Index n_actions() const { return probs_.cols(); }
  const Matrix& probs() const { return probs_; }
  double operator()(Index s, Index a) const { return probs_(s, a); }

 private:
  Matrix probs_;
};

/// Discounted stationary state distribution.
class StateDistribution {
 public:
  StateDistribution() = default;
  explicit StateDistribution(Vector d) : d_(std::move(d)) {
    if (!(d_.array() >= -1e-12).all() || std::abs(d_.sum() - 1.0) > 1e-9)
      throw NumericalError("state distribution is not a probability vector");
    d_ = d_.cwiseMax(0.0);
  }
  const Vector& values() const { return d_; }
  double operator[](Index i) const { return d_[i]; }
  Index size() const { return d_.size(); }

 private:
  Vector d_;
};

/// Finite CMDP (S, A, r, C, P, mu, D) with discount gamma. Immutable.
class TabularCMDP {
 public:
  TabularCMDP(Tensor3 transition, Tensor3 reward, std::vector<Tensor3> costs, Vector start_dist,
              double discount, std::vector<double> cost_limits)
      : transition_(std::move(transition)),
        reward_(std::move(reward)),
        costs_(std::move(costs)),
        start_dist_(std::move(start_dist)),
        discount_(discount),
        cost_limits_(std::move(cost_limits)) {
    require(transition_.n_states() > 0 && transition_.n_actions() > 0, "CMDP must be non-empty");
    require(reward_.same_shape(transition_), "reward tensor shape mismatch");
    for (const auto& c : costs_) require(c.same_shape(transition_), "cost tensor shape mismatch");
    require(costs_.size() == cost_limits_.size(), "costs and cost_limits must have equal length");
    require(discount_ > 0.0 && discount_ < 1.0, "discount must lie in (0,1)");
    require(start_dist_.size() == transition_.n_states(), "start distribution length mismatch");
    require(is_distribution(start_dist_, kConstructionTol), "start distribution invalid");
    validate_kernel(transition_);
  }

  Index n_states() const { return transition_.n_states(); }
  Index n_actions() const { return transition_.n_actions(); }
  std::size_t n_costs() const { return costs_.size(); }
  const Tensor3& transition() const { return transition_; }
  const Tensor3& reward() const { return reward_; }
  const std::vector<Tensor3>& costs() const { return costs_; }
  const Tensor3& cost(std::size_t i) const { return costs_.at(i); }
  const Vector& start_dist() const { return start_dist_; }
  double discount() const { return discount_; }
  const std::vector<double>& cost_limits() const { return cost_limits_; }

  const Tensor3& signal(const Signal& sig) const {
    if (sig.kind == Signal::Kind::Reward) return reward_;
    if (sig.cost_index < 0 || static_cast<std::size_t>(sig.cost_index) >= costs_.size())
      throw InvalidArgument("invalid cost index " + std::to_string(sig.cost_index));
    return costs_[static_cast<std::size_t>(sig.cost_index)];
  }

  /// Same CMDP with a different discount.
  TabularCMDP with_discount(double gamma) const {
    return {transition_, reward_, costs_, start_dist_, gamma, cost_limits_};
  }

 private:
  Tensor3 transition_;
  Tensor3 reward_;
  std::vector<Tensor3> costs_;
  Vector start_dist_;
  double discount_;
  std::vector<double> cost_limits_;
};

namespace detail {

inline void check_shapes(const TabularCMDP& cmdp, const PolicyTable& policy, const Tensor3& kernel) {
  require(policy.n_states() == cmdp.n_states() && policy.n_actions() == cmdp.n_actions(),
          "policy shape does not match CMDP");
  require(kernel.same_shape(cmdp.transition()), "kernel shape does not match CMDP");
}

/// Row-stochastic state-to-state matrix P^pi[i][j] = sum_a kernel[i][a][j] pi[a|i].
inline Matrix policy_kernel(const PolicyTable& policy, const Tensor3& kernel) {
  const Index n = kernel.n_states();
  Matrix p = Matrix::Zero(n, n);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < kernel.n_actions(); ++a)
      if (policy(s, a) != 0.0) p.row(s) += policy(s, a) * kernel.row(s, a).transpose();
  return p;
}

/// Expected one-step signal r^pi[s] = sum_a pi[a|s] sum_s' kernel * signal.
inline Vector expected_signal(const PolicyTable& policy, const Tensor3& kernel, const Tensor3& sig) {
  const Index n = kernel.n_states();
  Vector r = Vector::Zero(n);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < kernel.n_actions(); ++a)
      if (policy(s, a) != 0.0) r[s] += policy(s, a) * kernel.row(s, a).dot(sig.row(s, a));
  return r;
}

inline Vector solve_checked(const Matrix& lhs, const Vector& rhs, const char* what) {
  Eigen::PartialPivLU<Matrix> lu(lhs);
  Vector x = lu.solve(rhs);
  const double residual = (lhs * x - rhs).lpNorm<Eigen::Infinity>();
  if (!x.allFinite() || residual > kSolverResidualTol)
    throw NumericalError(std::string(what) + ": linear solve residual " + std::to_string(residual));
  return x;
}

}  // namespace detail

/// d = (1-gamma) (I - gamma P^pi^T)^{-1} mu, computed by a dense LU solve.
inline StateDistribution stationary_distribution(const TabularCMDP& cmdp, const PolicyTable& policy,
                                                 const Tensor3& kernel) {
  detail::check_shapes(cmdp, policy, kernel);
  const double g = cmdp.discount();
  const Index n = cmdp.n_states();
  const Matrix lhs = Matrix::Identity(n, n) - g * detail::policy_kernel(policy, kernel).transpose();
  return StateDistribution(
      detail::solve_checked(lhs, (1.0 - g) * cmdp.start_dist(), "stationary_distribution"));
}

/// Exact discounted return of a signal under (policy, kernel).
inline double exact_return(const TabularCMDP& cmdp, const PolicyTable& policy, const Tensor3& kernel,
                           const Signal& signal) {
  const Tensor3& sig = cmdp.signal(signal);
  const StateDistribution d = stationary_distribution(cmdp, policy, kernel);
  return d.values().dot(detail::expected_signal(policy, kernel, sig)) / (1.0 - cmdp.discount());
}

struct ValueAdvantage {
  Vector V;
  Matrix Q;
  Matrix A;
};

/// Solves the Bellman system for V and derives Q and A = Q - V.
inline ValueAdvantage exact_value_advantage(const TabularCMDP& cmdp, const PolicyTable& policy,
                                            const Tensor3& kernel, const Signal& signal) {
  detail::check_shapes(cmdp, policy, kernel);
  const Tensor3& sig = cmdp.signal(signal);
  const double g = cmdp.discount();
  const Index n = cmdp.n_states();
  const Index m = cmdp.n_actions();
  const Matrix lhs = Matrix::Identity(n, n) - g * detail::policy_kernel(policy, kernel);
  ValueAdvantage out;
  out.V = detail::solve_checked(lhs, detail::expected_signal(policy, kernel, sig),
                                "exact_value_advantage");
  out.Q.resize(n, m);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a)
      out.Q(s, a) = kernel.row(s, a).dot(sig.row(s, a) + g * out.V);
  out.A = out.Q.colwise() - out.V;
  return out;
}

/// Total variation distance 1/2 sum |p - q|.
inline double tv_distance(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q) {
  require(p.size() == q.size(), "tv_distance: length mismatch");
  return 0.5 * (p - q).cwiseAbs().sum();
}

/// KL(p || q) with 0 ln 0 = 0; +infinity when p is not absolutely continuous w.r.t. q.
inline double kl_discrete(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q) {
  require(p.size() == q.size(), "kl_discrete: length mismatch");
  double kl = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(kl, 0.0);
}

/// Pinsker: TV <= sqrt(KL / 2).
inline double pinsker_bound(double kl) { return std::sqrt(kl / 2.0); }

struct DivergenceExtrema {
  double eps_pi = 0.0;  ///< max_s TV(pi'(.|s) || pi(.|s))
  double eps_m = 0.0;   ///< max_{s,a} TV(P(.|s,a) || P_m(.|s,a))
};

inline DivergenceExtrema divergence_extrema(const PolicyTable& candidate, const PolicyTable& base,
                                            const Tensor3& true_kernel, const Tensor3& model_kernel) {
  require(candidate.n_states() == base.n_states() && candidate.n_actions() == base.n_actions(),
          "divergence_extrema: policy shape mismatch");
  require(true_kernel.same_shape(model_kernel), "divergence_extrema: kernel shape mismatch");
  require(true_kernel.n_states() == base.n_states() && true_kernel.n_actions() == base.n_actions(),
          "divergence_extrema: kernel/policy shape mismatch");
  DivergenceExtrema out;
  for (Index s = 0; s < base.n_states(); ++s) {
    out.eps_pi = std::max(out.eps_pi, tv_distance(candidate.probs().row(s).transpose(),
                                                  base.probs().row(s).transpose()));
    for (Index a = 0; a < base.n_actions(); ++a)
      out.eps_m = std::max(out.eps_m, tv_distance(true_kernel.row(s, a), model_kernel.row(s, a)));
  }
  return out;
}

}  // namespace cmbpo

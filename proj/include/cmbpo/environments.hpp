#pragma once

// Desk-scale constrained tasks: a tabular hazard gridworld and a continuous
// point mass that should run around a circle while staying in a corridor.

#include "cmbpo/cmdp.hpp"
#include "cmbpo/policy.hpp"
#include "cmbpo/rng.hpp"

#include <algorithm>
#include <concepts>
#include <limits>
#include <set>
#include <utility>

namespace cmbpo {

struct StepResult {
  Vector next_state;
  double reward = 0.0;
  double cost = 0.0;
  bool terminal = false;
};

template <class E>
concept Environment = requires(E e, const E& ce, Rng& rng, const Vector& s, const Vector& a) {
  { ce.state_dim() } -> std::convertible_to<Index>;
  { ce.action_dim() } -> std::convertible_to<Index>;
  { ce.horizon() } -> std::convertible_to<int>;
  { ce.reset(rng) } -> std::convertible_to<Vector>;
  { ce.step(s, a, rng) } -> std::convertible_to<StepResult>;
  { ce.cost(s, a, s) } -> std::convertible_to<double>;
  { ce.terminal(s, a, s) } -> std::convertible_to<bool>;
  { ce.project(s) } -> std::convertible_to<Vector>;
};

// ---------------------------------------------------------------- gridworld

struct GridworldSpec {
  int size = 5;
  std::vector<std::pair<int, int>> hazards{{0, 2}, {1, 2}};
  std::pair<int, int> start{2, 0};
  double slip = 0.1;
  double gamma = 0.9;
  double cost_limit = 0.2;
  int horizon = 100;

  void validate() const {
    require(size >= 1, "GridworldSpec: size must be positive");
    require(slip >= 0.0 && slip <= 1.0, "GridworldSpec: slip must lie in [0, 1]");
    require(gamma > 0.0 && gamma < 1.0, "GridworldSpec: gamma must lie in (0, 1)");
    require(horizon >= 1, "GridworldSpec: horizon must be >= 1");
    auto inside = [&](std::pair<int, int> c) {
      return c.first >= 0 && c.first < size && c.second >= 0 && c.second < size;
    };
    require(inside(start), "GridworldSpec: start outside the grid");
    for (auto h : hazards) require(inside(h), "GridworldSpec: hazard outside the grid");
    require(std::find(hazards.begin(), hazards.end(), start) == hazards.end(), "GridworldSpec: start on a hazard");
  }
};

/// Cell geometry shared by the tabular model and the sampling environment.
class GridLayout {
 public:
  static constexpr int kActions = 4;  // up, down, left, right

  explicit GridLayout(const GridworldSpec& spec) : spec_(spec) {
    spec_.validate();
    for (auto h : spec_.hazards) hazards_.insert(h);
  }

  int size() const { return spec_.size; }
  Index n_states() const { return static_cast<Index>(spec_.size) * spec_.size; }
  Index index(int r, int c) const { return static_cast<Index>(r) * spec_.size + c; }
  std::pair<int, int> cell(Index s) const {
    return {static_cast<int>(s / spec_.size), static_cast<int>(s % spec_.size)};
  }
  bool hazard(int r, int c) const { return hazards_.count({r, c}) > 0; }
  bool terminal(int r, int c) const { return hazard(r, c) || c == spec_.size - 1; }
  bool costly(int r, int c) const {
    if (hazard(r, c)) return true;
    static constexpr int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k)
      if (hazard(r + dr[k], c + dc[k])) return true;
    return false;
  }
  /// Cell reached by moving in direction k; walls keep the agent in place.
  std::pair<int, int> move(int r, int c, int k) const {
    static constexpr int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
    const int nr = r + dr[k], nc = c + dc[k];
    if (nr < 0 || nr >= spec_.size || nc < 0 || nc >= spec_.size) return {r, c};
    return {nr, nc};
  }
  const GridworldSpec& spec() const { return spec_; }

 private:
  GridworldSpec spec_;
  std::set<std::pair<int, int>> hazards_;
};

/// N x N grid, 4 moves with slip spread over the other moves, reward = column
/// progress, cost 1 on entering a hazard or a hazard-adjacent cell, hazards
/// and the rightmost column absorbing.
inline TabularCMDP hazard_gridworld(const GridworldSpec& spec) {
  const GridLayout g(spec);
  const Index S = g.n_states();
  const Index A = GridLayout::kActions;
  Tensor3 P(S, A), R(S, A), C(S, A);
  for (Index s = 0; s < S; ++s) {
    const auto [r, c] = g.cell(s);
    if (g.terminal(r, c)) {
      for (Index a = 0; a < A; ++a) P(s, a, s) = 1.0;
      continue;
    }
    for (Index a = 0; a < A; ++a)
      for (int k = 0; k < A; ++k) {
        const double p = k == a ? 1.0 - spec.slip : spec.slip / 3.0;
        if (p == 0.0) continue;
        const auto [nr, nc] = g.move(r, c, k);
        const Index s2 = g.index(nr, nc);
        P(s, a, s2) += p;
        R(s, a, s2) = static_cast<double>(nc - c);
        C(s, a, s2) = g.costly(nr, nc) ? 1.0 : 0.0;
      }
  }
  Vector mu = Vector::Zero(S);
  mu[g.index(spec.start.first, spec.start.second)] = 1.0;
  return {P, R, {C}, mu, spec.gamma, {spec.cost_limit}};
}

/// Sampling view of the gridworld. States are (row, col) pairs, actions one-hot.
class GridworldEnv {
 public:
  explicit GridworldEnv(const GridworldSpec& spec) : layout_(spec), cmdp_(hazard_gridworld(spec)) {}

  Index state_dim() const { return 2; }
  Index action_dim() const { return GridLayout::kActions; }
  int horizon() const { return layout_.spec().horizon; }
  const TabularCMDP& cmdp() const { return cmdp_; }
  const GridLayout& layout() const { return layout_; }

  Vector coords(Index s) const {
    const auto [r, c] = layout_.cell(s);
    return Vector{{static_cast<double>(r), static_cast<double>(c)}};
  }
  Index state_index(const Eigen::Ref<const Vector>& s) const {
    const int n = layout_.size();
    const int r = std::clamp(static_cast<int>(std::lround(s[0])), 0, n - 1);
    const int c = std::clamp(static_cast<int>(std::lround(s[1])), 0, n - 1);
    return layout_.index(r, c);
  }

  Vector reset(Rng&) const {
    const auto [r, c] = layout_.spec().start;
    return coords(layout_.index(r, c));
  }

  StepResult step(const Vector& s, const Vector& a, Rng& rng) const {
    const Index si = state_index(s);
    const Index ai = one_hot_index(a);
    const Index s2 = static_cast<Index>(rng.categorical(cmdp_.transition().row(si, ai)));
    StepResult out;
    out.next_state = coords(s2);
    out.reward = cmdp_.reward()(si, ai, s2);
    out.cost = cmdp_.cost(0)(si, ai, s2);
    const auto [r2, c2] = layout_.cell(s2);
    out.terminal = layout_.terminal(r2, c2);
    return out;
  }

  double cost(const Vector&, const Vector&, const Vector& s2) const {
    const auto [r, c] = layout_.cell(state_index(s2));
    return layout_.costly(r, c) ? 1.0 : 0.0;
  }
  bool terminal(const Vector&, const Vector&, const Vector& s2) const {
    const auto [r, c] = layout_.cell(state_index(s2));
    return layout_.terminal(r, c);
  }
  /// Nearest grid cell.
  Vector project(const Vector& s) const { return coords(state_index(s)); }

  /// One-hot cell features for tabular value functions.
  Matrix one_hot_features(const Matrix& S) const {
    Matrix F = Matrix::Zero(layout_.n_states(), S.cols());
    for (Index j = 0; j < S.cols(); ++j) F(state_index(S.col(j)), j) = 1.0;
    return F;
  }

  SoftmaxTablePolicy make_policy() const {
    const int n = layout_.size();
    return {layout_.n_states(), GridLayout::kActions, [n](const Eigen::Ref<const Vector>& s) {
              const int r = std::clamp(static_cast<int>(std::lround(s[0])), 0, n - 1);
              const int c = std::clamp(static_cast<int>(std::lround(s[1])), 0, n - 1);
              return static_cast<Index>(r) * n + c;
            }};
  }

 private:
  GridLayout layout_;
  TabularCMDP cmdp_;
};

struct ExactReturns {
  double reward = 0.0;
  double cost = 0.0;
};

inline ExactReturns exact_returns(const TabularCMDP& cmdp, const PolicyTable& pi) {
  return {exact_return(cmdp, pi, cmdp.transition(), Signal::reward()),
          exact_return(cmdp, pi, cmdp.transition(), Signal::cost(0))};
}

struct ConstrainedOptimum {
  std::vector<Index> actions;  ///< one action per state
  double reward = -std::numeric_limits<double>::infinity();
  double cost = 0.0;
  long long evaluated = 0;     ///< leaves or nodes evaluated
  bool feasible() const { return std::isfinite(reward); }
};

inline PolicyTable deterministic_table(const std::vector<Index>& actions, Index n_actions) {
  std::vector<int> a;
  for (Index x : actions) a.push_back(static_cast<int>(x));
  return PolicyTable::deterministic(a, n_actions);
}

/// Decision states: those whose action can change anything.
inline std::vector<Index> decision_states(const TabularCMDP& cmdp) {
  std::vector<Index> out;
  for (Index s = 0; s < cmdp.n_states(); ++s) {
    bool differs = false;
    for (Index a = 1; a < cmdp.n_actions() && !differs; ++a)
      for (Index s2 = 0; s2 < cmdp.n_states(); ++s2)
        if (cmdp.transition()(s, a, s2) != cmdp.transition()(s, 0, s2) ||
            cmdp.reward()(s, a, s2) != cmdp.reward()(s, 0, s2) || cmdp.cost(0)(s, a, s2) != cmdp.cost(0)(s, 0, s2)) {
          differs = true;
          break;
        }
    if (differs) out.push_back(s);
  }
  return out;
}

/// Plain enumeration of every deterministic policy over the decision states.
inline ConstrainedOptimum brute_force_constrained_optimum(const TabularCMDP& cmdp) {
  const auto dec = decision_states(cmdp);
  const Index A = cmdp.n_actions();
  require(static_cast<double>(dec.size()) * std::log(static_cast<double>(A)) < std::log(2e7),
          "brute_force_constrained_optimum: instance too large");
  ConstrainedOptimum best;
  std::vector<Index> act(static_cast<std::size_t>(cmdp.n_states()), 0);
  const double limit = cmdp.cost_limits()[0];
  while (true) {
    const auto ret = exact_returns(cmdp, deterministic_table(act, A));
    ++best.evaluated;
    if (ret.cost <= limit && ret.reward > best.reward) best = {act, ret.reward, ret.cost, best.evaluated};
    std::size_t k = 0;
    for (; k < dec.size(); ++k) {
      auto& x = act[static_cast<std::size_t>(dec[k])];
      if (++x < A) break;
      x = 0;
    }
    if (k == dec.size()) break;
  }
  return best;
}

namespace detail {

/// Policy iteration for max_pi E[sum gamma^t q(s, pi(s))] with fixed[s] >= 0
/// pinning the action of s. pol is the warm start and receives the optimum.
inline Vector restricted_optimal_values(const TabularCMDP& cmdp, const Matrix& q, const std::vector<Index>& fixed,
                                        std::vector<Index>& pol, int max_iters = 200) {
  const Index S = cmdp.n_states(), A = cmdp.n_actions();
  const double g = cmdp.discount();
  const auto& P = cmdp.transition();
  if (pol.size() != static_cast<std::size_t>(S)) pol.assign(static_cast<std::size_t>(S), 0);
  for (Index s = 0; s < S; ++s)
    if (fixed[static_cast<std::size_t>(s)] >= 0) pol[static_cast<std::size_t>(s)] = fixed[static_cast<std::size_t>(s)];
  Vector V(S);
  Matrix M(S, S);
  Vector rhs(S);
  for (int it = 0; it < max_iters; ++it) {
    M.setIdentity();
    for (Index s = 0; s < S; ++s) {
      const Index a = pol[static_cast<std::size_t>(s)];
      M.row(s) -= g * P.row(s, a).transpose();
      rhs[s] = q(s, a);
    }
    V = M.partialPivLu().solve(rhs);
    bool changed = false;
    for (Index s = 0; s < S; ++s) {
      if (fixed[static_cast<std::size_t>(s)] >= 0) continue;
      const Index cur = pol[static_cast<std::size_t>(s)];
      double best = q(s, cur) + g * P.row(s, cur).dot(V);
      for (Index a = 0; a < A; ++a) {
        const double v = q(s, a) + g * P.row(s, a).dot(V);
        if (v > best + 1e-12) {
          best = v;
          pol[static_cast<std::size_t>(s)] = a;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  return V;
}

}  // namespace detail

/// Exact constrained optimum over deterministic policies by depth-first
/// branch and bound. A node is pruned when even the best completion under the
/// Lagrangian relaxation cannot beat the incumbent, or when the cheapest
/// completion already violates the limit.
inline ConstrainedOptimum exact_constrained_optimum(const TabularCMDP& cmdp, std::vector<double> multipliers = {}) {
  const Index S = cmdp.n_states(), A = cmdp.n_actions();
  const double limit = cmdp.cost_limits().at(0);
  const double tol = 1e-12;
  Matrix r_sa(S, A), c_sa(S, A);
  for (Index s = 0; s < S; ++s)
    for (Index a = 0; a < A; ++a) {
      r_sa(s, a) = cmdp.transition().row(s, a).dot(cmdp.reward().row(s, a));
      c_sa(s, a) = cmdp.transition().row(s, a).dot(cmdp.cost(0).row(s, a));
    }
  if (multipliers.empty()) multipliers = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};
  const Vector mu = cmdp.start_dist();

  auto dec = decision_states(cmdp);
  std::vector<Index> fixed(static_cast<std::size_t>(S), -1);
  for (Index s = 0; s < S; ++s)
    if (std::find(dec.begin(), dec.end(), s) == dec.end()) fixed[static_cast<std::size_t>(s)] = 0;

  ConstrainedOptimum best;
  // Incumbent from the Lagrangian greedy policies.
  for (double lam : multipliers) {
    std::vector<Index> act;
    detail::restricted_optimal_values(cmdp, r_sa - lam * c_sa, fixed, act);
    const auto ret = exact_returns(cmdp, deterministic_table(act, A));
    if (ret.cost <= limit + tol && ret.reward > best.reward) best = {act, ret.reward, ret.cost, 0};
  }

  // Branch on high-visitation states first (visitation of the uniform policy).
  const Vector d = stationary_distribution(cmdp, PolicyTable::uniform(S, A), cmdp.transition()).values();
  std::stable_sort(dec.begin(), dec.end(), [&](Index a, Index b) { return d[a] > d[b]; });

  long long nodes = 0;
  std::vector<std::vector<Index>> warm(multipliers.size());
  std::vector<Index> warm_cost;
  const Matrix neg_c = -c_sa;
  std::function<void(std::size_t)> search = [&](std::size_t depth) {
    ++nodes;
    if (depth == dec.size()) {
      std::vector<Index> act(fixed.begin(), fixed.end());
      const auto ret = exact_returns(cmdp, deterministic_table(act, A));
      if (ret.cost <= limit + tol && ret.reward > best.reward) best = {act, ret.reward, ret.cost, 0};
      return;
    }
    // Cheapest completion must be feasible.
    const Vector cmin = -detail::restricted_optimal_values(cmdp, neg_c, fixed, warm_cost);
    if (mu.dot(cmin) > limit + tol) return;
    double ub = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < multipliers.size(); ++i) {
      const double lam = multipliers[i];
      const Vector V = detail::restricted_optimal_values(cmdp, r_sa - lam * c_sa, fixed, warm[i]);
      ub = std::min(ub, mu.dot(V) + lam * limit);
    }
    if (ub <= best.reward + tol) return;
    const Index s = dec[depth];
    for (Index a = 0; a < A; ++a) {
      fixed[static_cast<std::size_t>(s)] = a;
      search(depth + 1);
    }
    fixed[static_cast<std::size_t>(s)] = -1;
  };
  search(0);
  best.evaluated = nodes;
  return best;
}

// -------------------------------------------------------------- point circle

struct PointCircleSpec {
  double radius = 1.0;
  double half_width = 0.5;
  double dt = 0.1;
  int horizon = 400;
  double cost_limit = 10.0;
  double control_cost = 0.5;
  double init_noise = 0.05;

  void validate() const {
    require(radius > 0.0 && half_width > 0.0 && dt > 0.0, "PointCircleSpec: geometry must be positive");
    require(horizon >= 1, "PointCircleSpec: horizon must be >= 1");
    require(control_cost >= 0.0 && init_noise >= 0.0, "PointCircleSpec: negative coefficient");
  }
};

/// Point mass with state (x, y, vx, vy) and acceleration actions in [-1, 1]^2.
class PointCircleEnv {
 public:
  explicit PointCircleEnv(const PointCircleSpec& spec) : spec_(spec) { spec_.validate(); }

  Index state_dim() const { return 4; }
  Index action_dim() const { return 2; }
  int horizon() const { return spec_.horizon; }
  const PointCircleSpec& spec() const { return spec_; }

  Vector reset(Rng& rng) const {
    Vector s = Vector::Zero(4);
    s[0] = rng.uniform(-spec_.init_noise, spec_.init_noise);
    s[1] = rng.uniform(-spec_.init_noise, spec_.init_noise);
    return s;
  }

  /// Exact zero-order-hold integration of the clipped acceleration.
  Vector dynamics(const Vector& s, const Vector& a) const {
    const Vector u = a.cwiseMax(-1.0).cwiseMin(1.0);
    const double dt = spec_.dt;
    Vector s2(4);
    s2.head(2) = s.head(2) + s.tail(2) * dt + 0.5 * u * dt * dt;
    s2.tail(2) = s.tail(2) + u * dt;
    return s2;
  }

  /// Tangential velocity along the circle, damped off the circle, minus control effort.
  double reward(const Vector& a, const Vector& s2) const {
    const Vector u = a.cwiseMax(-1.0).cwiseMin(1.0);
    const double x = s2[0], y = s2[1], vx = s2[2], vy = s2[3];
    const double r = std::hypot(x, y);
    return (-y * vx + x * vy) / (1.0 + std::abs(r - spec_.radius)) - spec_.control_cost * u.squaredNorm();
  }

  double cost(const Vector&, const Vector&, const Vector& s2) const {
    return std::abs(s2[0]) > spec_.half_width ? 1.0 : 0.0;
  }
  bool terminal(const Vector&, const Vector&, const Vector&) const { return false; }
  Vector project(const Vector& s) const { return s; }

  StepResult step(const Vector& s, const Vector& a, Rng&) const {
    require(s.size() == 4 && a.size() == 2, "PointCircleEnv: bad state or action dimension");
    StepResult out;
    out.next_state = dynamics(s, a);
    out.reward = reward(a, out.next_state);
    out.cost = cost(s, a, out.next_state);
    return out;
  }

 private:
  PointCircleSpec spec_;
};

static_assert(Environment<GridworldEnv>);
static_assert(Environment<PointCircleEnv>);

}  // namespace cmbpo

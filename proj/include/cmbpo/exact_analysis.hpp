#pragma once

// Exact checks of the model-based policy-improvement bound on finite CMDPs.
//
// For a base policy pi, a candidate pi' and a model kernel P_m, the true
// return difference DeltaJ = J(pi') - J(pi) is bracketed by
//
//     (L_m -/+ 4 delta_max eps) / (1 - gamma)
//
// where L_m is the likelihood-ratio weighted model advantage over the model
// state distribution, delta_max the largest TD residual of the model value
// function, and eps = eps_pi eps_m + gamma/(1-gamma) (eps_pi^2 + 2 eps_pi eps_m).

#include "cmbpo/cmdp.hpp"
#include "cmbpo/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cmbpo {

inline constexpr double kHoldsTol = 1e-9;

struct BoundaryReport {
  double delta_j = 0.0;           ///< exact J(pi') - J(pi) on the true kernel
  double L_m = 0.0;               ///< relative performance term
  double delta_max = 0.0;         ///< max |sig + gamma V_m(s') - V_m(s)| over all (s,a,s')
  double delta_max_reachable = 0.0;  ///< same, restricted to P(s'|s,a) > 0
  double eps_pi = 0.0;
  double eps_m = 0.0;
  double eps = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  double lower_reachable = 0.0;
  double upper_reachable = 0.0;
  bool holds = false;             ///< official flag, uses the unrestricted delta_max
  bool holds_reachable = false;

  /// Distance from delta_j to the nearest bound (negative on violation).
  double slack() const { return std::min(delta_j - lower, upper - delta_j); }
};

struct LemmaReport {
  double lhs_l1 = 0.0;
  double rhs_bound = 0.0;
  bool holds = false;
  double ratio() const { return rhs_bound > 0.0 ? lhs_l1 / rhs_bound : 0.0; }
};

struct ErrorTermReport {
  double e_dpi_dm = 0.0;        ///< E_{Delta pi Delta m}
  double e_dpi = 0.0;           ///< E_{Delta pi}
  double bound_dpi_dm = 0.0;
  double bound_dpi = 0.0;
  bool e1_ok = false;
  bool e2_ok = false;
};

namespace detail {

inline void check_policy_pair(const PolicyTable& a, const PolicyTable& b) {
  require(a.n_states() == b.n_states() && a.n_actions() == b.n_actions(), "policy shape mismatch");
}

/// TD residual sig(s,a,s') + gamma f(s') - f(s).
inline double td_residual(const Tensor3& sig, const Vector& f, double gamma, Index s, Index a, Index s2) {
  return sig(s, a, s2) + gamma * f[s2] - f[s];
}

/// Likelihood ratio pi'/pi with the convention 0/0 = 0.
inline double likelihood_ratio(double candidate, double base) {
  if (base > 0.0) return candidate / base;
  if (candidate > 0.0)
    throw InvalidArgument("likelihood ratio undefined: base policy has zero probability where candidate does not");
  return 0.0;
}

}  // namespace detail

/// L^pi_m(pi') = E_{s~d^pi_m, a~pi}[(pi'/pi) A^pi_m(s,a)], computed exactly.
inline double relative_performance(const TabularCMDP& cmdp, const Tensor3& model_kernel,
                                   const PolicyTable& base, const PolicyTable& candidate,
                                   const Signal& signal) {
  detail::check_policy_pair(base, candidate);
  const StateDistribution d_m = stationary_distribution(cmdp, base, model_kernel);
  const ValueAdvantage va = exact_value_advantage(cmdp, base, model_kernel, signal);
  double total = 0.0;
  for (Index s = 0; s < cmdp.n_states(); ++s) {
    double inner = 0.0;
    for (Index a = 0; a < cmdp.n_actions(); ++a) {
      const double ratio = detail::likelihood_ratio(candidate(s, a), base(s, a));
      inner += base(s, a) * ratio * va.A(s, a);
    }
    total += d_m[s] * inner;
  }
  return total;
}

inline double combined_penalty(double eps_pi, double eps_m, double gamma) {
  return eps_pi * eps_m + gamma / (1.0 - gamma) * (eps_pi * eps_pi + 2.0 * eps_pi * eps_m);
}

inline BoundaryReport boundary_report(const TabularCMDP& cmdp, const Tensor3& model_kernel,
                                      const PolicyTable& base, const PolicyTable& candidate,
                                      const Signal& signal) {
  detail::check_policy_pair(base, candidate);
  const double g = cmdp.discount();
  const Tensor3& P = cmdp.transition();
  const Tensor3& sig = cmdp.signal(signal);
  BoundaryReport rep;
  rep.delta_j = exact_return(cmdp, candidate, P, signal) - exact_return(cmdp, base, P, signal);
  rep.L_m = relative_performance(cmdp, model_kernel, base, candidate, signal);
  const ValueAdvantage va = exact_value_advantage(cmdp, base, model_kernel, signal);
  for (Index s = 0; s < cmdp.n_states(); ++s)
    for (Index a = 0; a < cmdp.n_actions(); ++a)
      for (Index s2 = 0; s2 < cmdp.n_states(); ++s2) {
        const double td = std::abs(detail::td_residual(sig, va.V, g, s, a, s2));
        rep.delta_max = std::max(rep.delta_max, td);
        if (P(s, a, s2) > 0.0) rep.delta_max_reachable = std::max(rep.delta_max_reachable, td);
      }
  const DivergenceExtrema ext = divergence_extrema(candidate, base, P, model_kernel);
  rep.eps_pi = ext.eps_pi;
  rep.eps_m = ext.eps_m;
  rep.eps = combined_penalty(rep.eps_pi, rep.eps_m, g);
  const double pen = 4.0 * rep.delta_max * rep.eps;
  const double pen_r = 4.0 * rep.delta_max_reachable * rep.eps;
  rep.lower = (rep.L_m - pen) / (1.0 - g);
  rep.upper = (rep.L_m + pen) / (1.0 - g);
  rep.lower_reachable = (rep.L_m - pen_r) / (1.0 - g);
  rep.upper_reachable = (rep.L_m + pen_r) / (1.0 - g);
  rep.holds = rep.lower - kHoldsTol <= rep.delta_j && rep.delta_j <= rep.upper + kHoldsTol;
  rep.holds_reachable =
      rep.lower_reachable - kHoldsTol <= rep.delta_j && rep.delta_j <= rep.upper_reachable + kHoldsTol;
  return rep;
}

/// ||d^{pi'} - d^pi_m||_1 against 2 gamma/(1-gamma) (E_{d^pi_m}[TV(pi',pi)] + E_{d^pi_m,pi}[TV(P,P_m)]).
inline LemmaReport lemma_state_dist_check(const TabularCMDP& cmdp, const Tensor3& model_kernel,
                                          const PolicyTable& base, const PolicyTable& candidate) {
  detail::check_policy_pair(base, candidate);
  const double g = cmdp.discount();
  const Tensor3& P = cmdp.transition();
  const StateDistribution d_cand = stationary_distribution(cmdp, candidate, P);
  const StateDistribution d_m = stationary_distribution(cmdp, base, model_kernel);
  double policy_term = 0.0;
  double model_term = 0.0;
  for (Index s = 0; s < cmdp.n_states(); ++s) {
    policy_term += d_m[s] * tv_distance(candidate.probs().row(s).transpose(), base.probs().row(s).transpose());
    for (Index a = 0; a < cmdp.n_actions(); ++a)
      model_term += d_m[s] * base(s, a) * tv_distance(P.row(s, a), model_kernel.row(s, a));
  }
  LemmaReport rep;
  rep.lhs_l1 = (d_cand.values() - d_m.values()).lpNorm<1>();
  rep.rhs_bound = 2.0 * g / (1.0 - g) * (policy_term + model_term);
  rep.holds = rep.lhs_l1 <= rep.rhs_bound + kHoldsTol;
  return rep;
}

/// |J(pi) - E_mu[f] - 1/(1-gamma) E_{d^pi,pi,P}[r + gamma f(s') - f(s)]| for arbitrary f.
inline double return_identity_check(const TabularCMDP& cmdp, const PolicyTable& policy, const Vector& f,
                                    const Signal& signal = Signal::reward()) {
  require(f.size() == cmdp.n_states(), "return_identity_check: f length mismatch");
  require(f.allFinite(), "return_identity_check: f must be finite");
  const double g = cmdp.discount();
  const Tensor3& P = cmdp.transition();
  const Tensor3& sig = cmdp.signal(signal);
  const StateDistribution d = stationary_distribution(cmdp, policy, P);
  double td = 0.0;
  for (Index s = 0; s < cmdp.n_states(); ++s)
    for (Index a = 0; a < cmdp.n_actions(); ++a) {
      if (policy(s, a) == 0.0) continue;
      double inner = 0.0;
      for (Index s2 = 0; s2 < cmdp.n_states(); ++s2)
        inner += P(s, a, s2) * detail::td_residual(sig, f, g, s, a, s2);
      td += d[s] * policy(s, a) * inner;
    }
  const double j = exact_return(cmdp, policy, P, signal);
  return std::abs(j - cmdp.start_dist().dot(f) - td / (1.0 - g));
}

/// |J(pi') - J(pi) - 1/(1-gamma) E_{s~d^{pi'}, a~pi'}[A^pi(s,a)]| on the true kernel.
inline double return_difference_residual(const TabularCMDP& cmdp, const PolicyTable& base,
                                         const PolicyTable& candidate,
                                         const Signal& signal = Signal::reward()) {
  const Tensor3& P = cmdp.transition();
  const ValueAdvantage va = exact_value_advantage(cmdp, base, P, signal);
  const StateDistribution d = stationary_distribution(cmdp, candidate, P);
  double expected_adv = 0.0;
  for (Index s = 0; s < cmdp.n_states(); ++s)
    expected_adv += d[s] * candidate.probs().row(s).dot(va.A.row(s));
  const double dj = exact_return(cmdp, candidate, P, signal) - exact_return(cmdp, base, P, signal);
  return std::abs(dj - expected_adv / (1.0 - cmdp.discount()));
}

/// Exact error terms of the return decomposition with f = V^pi_m and their bounds.
inline ErrorTermReport error_term_check(const TabularCMDP& cmdp, const Tensor3& model_kernel,
                                        const PolicyTable& base, const PolicyTable& candidate,
                                        const Signal& signal = Signal::reward()) {
  detail::check_policy_pair(base, candidate);
  const double g = cmdp.discount();
  const Tensor3& P = cmdp.transition();
  const Tensor3& sig = cmdp.signal(signal);
  const Index n = cmdp.n_states();
  const Index m = cmdp.n_actions();
  const ValueAdvantage va = exact_value_advantage(cmdp, base, model_kernel, signal);

  // E_{s'~P}[delta_f(s,a,s')] with f = V^pi_m.
  Matrix td_true(n, m);
  double delta_max = 0.0;
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a) {
      double acc = 0.0;
      for (Index s2 = 0; s2 < n; ++s2) {
        const double td = detail::td_residual(sig, va.V, g, s, a, s2);
        acc += P(s, a, s2) * td;
        delta_max = std::max(delta_max, std::abs(td));
      }
      td_true(s, a) = acc;
    }

  const Vector d_cand = stationary_distribution(cmdp, candidate, P).values();
  const Vector d_base = stationary_distribution(cmdp, base, P).values();
  const Vector d_m = stationary_distribution(cmdp, base, model_kernel).values();

  Vector policy_shift(n);  // <pi' - pi, E_P[delta]>_a
  Vector on_policy(n);     // E_{a~pi, s'~P}[delta]
  for (Index s = 0; s < n; ++s) {
    policy_shift[s] = (candidate.probs().row(s) - base.probs().row(s)).dot(td_true.row(s));
    on_policy[s] = base.probs().row(s).dot(td_true.row(s));
  }
  const DivergenceExtrema ext = divergence_extrema(candidate, base, P, model_kernel);

  ErrorTermReport rep;
  rep.e_dpi_dm = (d_cand - d_m).dot(policy_shift);
  rep.e_dpi = (d_cand - d_base).dot(on_policy);
  const double scale = 4.0 * g / (1.0 - g) * delta_max;
  rep.bound_dpi_dm = scale * (ext.eps_pi * ext.eps_pi + ext.eps_pi * ext.eps_m);
  rep.bound_dpi = scale * ext.eps_pi * ext.eps_m;
  rep.e1_ok = std::abs(rep.e_dpi_dm) <= rep.bound_dpi_dm + kHoldsTol;
  rep.e2_ok = std::abs(rep.e_dpi) <= rep.bound_dpi + kHoldsTol;
  return rep;
}

/// True iff j_c + l_mc/(1-gamma) + 4 delta_c_max eps/(1-gamma) <= d_c.
inline bool safety_certificate(double j_c, double l_mc, double delta_c_max, double eps, double gamma,
                               double d_c) {
  require(gamma > 0.0 && gamma < 1.0, "safety_certificate: gamma must lie in (0,1)");
  require(eps >= 0.0 && delta_c_max >= 0.0, "safety_certificate: penalty terms must be non-negative");
  return j_c + l_mc / (1.0 - gamma) + 4.0 * delta_c_max * eps / (1.0 - gamma) <= d_c;
}

// ---------------------------------------------------------------------------
// Random instances

struct RandomInstanceConfig {
  int min_states = 2;
  int max_states = 8;
  int min_actions = 2;
  int max_actions = 4;
  double min_gamma = 0.5;
  double max_gamma = 0.95;
  double max_model_mix = 0.5;  ///< lambda in (1-lambda) P + lambda Dirichlet
  bool equal_policies = false; ///< force pi' = pi
  int n_costs = 1;
};

struct RandomInstance {
  TabularCMDP cmdp;
  Tensor3 model_kernel;
  PolicyTable base;
  PolicyTable candidate;
  double model_mix = 0.0;
};

inline Tensor3 random_kernel(Index n, Index m, Rng& rng) {
  Tensor3 k(n, m);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a) k.row(s, a) = rng.dirichlet(n);
  return k;
}

inline PolicyTable random_policy(Index n, Index m, Rng& rng) {
  Matrix p(n, m);
  for (Index s = 0; s < n; ++s) p.row(s) = rng.dirichlet(m).transpose();
  return PolicyTable(std::move(p));
}

/// Convex mixture (1-lambda) P + lambda Q of two kernels.
inline Tensor3 mix_kernels(const Tensor3& p, const Tensor3& q, double lambda) {
  require(p.same_shape(q), "mix_kernels: shape mismatch");
  Tensor3 out(p.n_states(), p.n_actions());
  for (Index s = 0; s < p.n_states(); ++s)
    for (Index a = 0; a < p.n_actions(); ++a) {
      Vector row = (1.0 - lambda) * p.row(s, a) + lambda * q.row(s, a);
      out.row(s, a) = row / row.sum();
    }
  return out;
}

/// Dirichlet(1) rows, rewards U[-1,1], costs U[0,1], Dirichlet(1) policies,
/// model kernels (1-lambda) P + lambda Dirichlet with lambda ~ U[0, max_model_mix].
inline RandomInstance random_instance(Rng& rng, const RandomInstanceConfig& cfg = {}) {
  const Index n = rng.uniform_int(cfg.min_states, cfg.max_states);
  const Index m = rng.uniform_int(cfg.min_actions, cfg.max_actions);
  const double gamma = rng.uniform(cfg.min_gamma, cfg.max_gamma);
  Tensor3 P = random_kernel(n, m, rng);
  Tensor3 R(n, m);
  for (Index s = 0; s < n; ++s)
    for (Index a = 0; a < m; ++a)
      for (Index s2 = 0; s2 < n; ++s2) R(s, a, s2) = rng.uniform(-1.0, 1.0);
  std::vector<Tensor3> costs;
  std::vector<double> limits;
  for (int k = 0; k < cfg.n_costs; ++k) {
    Tensor3 C(n, m);
    for (Index s = 0; s < n; ++s)
      for (Index a = 0; a < m; ++a)
        for (Index s2 = 0; s2 < n; ++s2) C(s, a, s2) = rng.uniform(0.0, 1.0);
    costs.push_back(std::move(C));
    limits.push_back(0.5 / (1.0 - gamma));
  }
  const Vector mu = rng.dirichlet(n);
  const double lambda = rng.uniform(0.0, cfg.max_model_mix);
  Tensor3 noise = random_kernel(n, m, rng);
  Tensor3 model = mix_kernels(P, noise, lambda);
  PolicyTable base = random_policy(n, m, rng);
  PolicyTable candidate = cfg.equal_policies ? base : random_policy(n, m, rng);
  return {TabularCMDP(std::move(P), std::move(R), std::move(costs), mu, gamma, std::move(limits)),
          std::move(model), std::move(base), std::move(candidate), lambda};
}

}  // namespace cmbpo

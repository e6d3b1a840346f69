#pragma once

// Trust-region constrained policy update: linearised objective and cost,
// quadratic KL model, analytic dual solution, backtracking line search.

#include "cmbpo/policy.hpp"

#include <functional>
#include <limits>
#include <string>

namespace cmbpo {

struct CpoConfig {
  double target_kl = 0.01;
  double cost_limit = 10.0;
  int cg_iters = 10;
  double cg_damping = 0.1;
  int backtrack_steps = 10;
  double backtrack_coeff = 0.8;
  double lambda = 0.97;
  double lambda_c = 0.5;
  double gamma = 0.99;
  double gamma_c = 0.97;

  void validate() const {
    require(target_kl > 0.0, "CpoConfig: target_kl must be positive");
    require(cg_iters >= 1, "CpoConfig: cg_iters must be >= 1");
    require(backtrack_steps >= 1, "CpoConfig: backtrack_steps must be >= 1");
    require(backtrack_coeff > 0.0 && backtrack_coeff < 1.0, "CpoConfig: backtrack_coeff must lie in (0, 1)");
    require(gamma > 0.0 && gamma < 1.0 && gamma_c > 0.0 && gamma_c < 1.0, "CpoConfig: discounts must lie in (0, 1)");
  }
};

/// Feasibility cases of the dual, numbered as in the reference construction.
enum class CpoCase : int {
  Recovery = 0,            ///< infeasible, no feasible point in the trust region
  InfeasibleRecoverable = 1,
  Active = 2,
  Inactive = 3,            ///< whole trust region is feasible
  Unconstrained = 4,       ///< b ~ 0 and currently feasible
};

inline std::string case_label(CpoCase c) {
  switch (c) {
    case CpoCase::Recovery: return "recovery";
    case CpoCase::InfeasibleRecoverable: return "infeasible_recoverable";
    case CpoCase::Active: return "active";
    case CpoCase::Inactive: return "inactive";
    case CpoCase::Unconstrained: return "unconstrained";
  }
  return "?";
}

using LinearOperator = std::function<Vector(const Vector&)>;

/// Approximate solution of H x = g.
inline Vector conjugate_gradient(const LinearOperator& apply_H, const Vector& g, int iters, double tol = 1e-10) {
  require(iters >= 1, "conjugate_gradient: iters must be >= 1");
  Vector x = Vector::Zero(g.size());
  Vector r = g, p = g;
  double rr = r.squaredNorm();
  for (int i = 0; i < iters && std::sqrt(rr) > tol; ++i) {
    const Vector Hp = apply_H(p);
    const double pHp = p.dot(Hp);
    if (!std::isfinite(pHp)) throw NumericalError("conjugate_gradient: non-finite curvature");
    if (pHp <= 0.0) break;
    const double alpha = rr / pHp;
    x += alpha * p;
    r -= alpha * Hp;
    const double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  if (!x.allFinite()) throw NumericalError("conjugate_gradient: non-finite iterate");
  return x;
}

struct CpoDirection {
  Vector x;  ///< parameter step
  CpoCase optim_case = CpoCase::Unconstrained;
  double q = 0.0, r = 0.0, s = 0.0;
  double lambda = 0.0, nu = 0.0;
  bool rescaled = false;
  std::string label() const { return case_label(optim_case); }
};

/// max g^T x s.t. 1/2 x^T H x <= target_kl, b^T x + c <= 0 via the analytic dual.
inline CpoDirection cpo_step(const Vector& g, const Vector& b, double c, const LinearOperator& apply_H,
                             const CpoConfig& cfg) {
  require(g.size() == b.size(), "cpo_step: gradient size mismatch");
  constexpr double kEps = 1e-8;
  const double delta = cfg.target_kl;
  // The reference construction minimises; work with the loss gradient.
  const Vector gl = -g;
  const Vector v = conjugate_gradient(apply_H, gl, cfg.cg_iters);
  CpoDirection out;
  out.q = gl.dot(v);
  Vector w = Vector::Zero(g.size());
  double r = 0.0, s = 0.0;
  if (b.squaredNorm() <= 1e-8 && c < 0.0) {
    out.optim_case = CpoCase::Unconstrained;
  } else {
    w = conjugate_gradient(apply_H, b, cfg.cg_iters);
    r = w.dot(gl);
    s = w.dot(apply_H(w));
    if (!(s > 0.0)) s = kEps;
    const double B = 2.0 * delta - c * c / s;
    if (c < 0.0 && B < 0.0) out.optim_case = CpoCase::Inactive;
    else if (c < 0.0) out.optim_case = CpoCase::Active;
    else if (B >= 0.0) out.optim_case = CpoCase::InfeasibleRecoverable;
    else out.optim_case = CpoCase::Recovery;
  }
  out.r = r;
  out.s = s;
  const double q = std::max(out.q, 0.0);
  double lam = 0.0, nu = 0.0;
  switch (out.optim_case) {
    case CpoCase::Unconstrained:
    case CpoCase::Inactive:
      lam = std::sqrt(q / (2.0 * delta));
      break;
    case CpoCase::InfeasibleRecoverable:
    case CpoCase::Active: {
      const double A = q - r * r / s;
      const double B = 2.0 * delta - c * c / s;
      const double rc = c != 0.0 ? r / c : std::numeric_limits<double>::infinity();
      double la_lo = 0.0, la_hi = rc, lb_lo = rc, lb_hi = std::numeric_limits<double>::infinity();
      if (c >= 0.0) {
        std::swap(la_lo, lb_lo);
        std::swap(la_hi, lb_hi);
      }
      auto proj = [](double x, double lo, double hi) { return std::max(lo, std::min(hi, x)); };
      const double lam_a = proj(std::sqrt(std::max(A, 0.0) / std::max(B, kEps)), la_lo, la_hi);
      const double lam_b = proj(std::sqrt(q / (2.0 * delta)), lb_lo, lb_hi);
      auto f_a = [&](double l) { return -0.5 * (A / (l + kEps) + B * l) - r * c / (s + kEps); };
      auto f_b = [&](double l) { return -0.5 * (q / (l + kEps) + 2.0 * delta * l); };
      lam = f_a(lam_a) >= f_b(lam_b) ? lam_a : lam_b;
      nu = std::max(0.0, lam * c - r) / (s + kEps);
      break;
    }
    case CpoCase::Recovery:
      nu = std::sqrt(2.0 * delta / (s + kEps));
      break;
  }
  out.lambda = lam;
  out.nu = nu;
  Vector xl = out.optim_case == CpoCase::Recovery ? Vector(nu * w) : Vector((v + nu * w) / (lam + kEps));
  // Objective and cost gradients parallel in the H metric: A = 0, lambda -> 0
  // and v + nu w -> 0, so the quotient above is pure round-off. The optimum
  // is then the boundary point of the linear constraint along H^-1 b.
  const bool dual_active = out.optim_case == CpoCase::Active || out.optim_case == CpoCase::InfeasibleRecoverable;
  if (dual_active && lam < kEps && out.q - r * r / s <= 1e-10 * std::max(out.q, kEps)) xl = (c / s) * w;
  out.x = -xl;
  const double quad = 0.5 * out.x.dot(apply_H(out.x));
  if (quad > delta) {
    out.x *= std::sqrt(delta / quad);
    out.rescaled = true;
  }
  if (!out.x.allFinite()) throw NumericalError("cpo_step: non-finite direction");
  return out;
}

/// Samples for one policy update.
struct PolicyBatch {
  Matrix states, actions;
  Vector old_log_prob;
  Vector advantages;       ///< already normalised
  Vector cost_advantages;  ///< never normalised
  Index size() const { return states.cols(); }
};

struct SurrogateValues {
  double surr = 0.0;       ///< mean ratio * A
  double cost_surr = 0.0;  ///< cost_scale * mean ratio * A_c
};

template <StochasticPolicy P>
SurrogateValues surrogate_values(const P& policy, const PolicyBatch& batch, double cost_scale = 1.0) {
  const Vector ratio = (policy.log_prob(batch.states, batch.actions) - batch.old_log_prob).array().exp();
  const double n = static_cast<double>(batch.size());
  return {ratio.dot(batch.advantages) / n, cost_scale * ratio.dot(batch.cost_advantages) / n};
}

struct SurrogateGrads {
  Vector g;  ///< gradient of the return surrogate
  Vector b;  ///< gradient of the cost surrogate
  double c_slack = 0.0;  ///< J_c estimate - limit; positive means infeasible
  SurrogateValues values;
};

template <StochasticPolicy P>
SurrogateGrads surrogate_grads(const P& policy, const PolicyBatch& batch, double jc_estimate, double cost_limit,
                               double cost_scale = 1.0) {
  require(batch.size() >= 1, "surrogate_grads: empty batch");
  const Vector logp = policy.log_prob(batch.states, batch.actions);
  const Vector ratio = (logp - batch.old_log_prob).array().exp();
  if (!ratio.allFinite()) throw NumericalError("surrogate_grads: non-finite likelihood ratio");
  const double n = static_cast<double>(batch.size());
  SurrogateGrads out;
  out.g = policy.grad_log_prob(batch.states, batch.actions, ratio.cwiseProduct(batch.advantages) / n);
  out.b = policy.grad_log_prob(batch.states, batch.actions, ratio.cwiseProduct(batch.cost_advantages) * (cost_scale / n));
  if (!out.g.allFinite() || !out.b.allFinite()) throw NumericalError("surrogate_grads: non-finite gradient");
  out.c_slack = jc_estimate - cost_limit;
  out.values = {ratio.dot(batch.advantages) / n, cost_scale * ratio.dot(batch.cost_advantages) / n};
  return out;
}

template <StochasticPolicy P>
Vector fisher_vector_product(const P& policy, const Matrix& states, const Vector& v, double damping) {
  const Vector hv = policy.fisher_vector_product(states, v) + damping * v;
  if (!hv.allFinite()) throw NumericalError("fisher_vector_product: non-finite result");
  return hv;
}

struct LineSearchResult {
  bool accepted = false;
  int backtracks = 0;
  double kl = 0.0;               ///< measured mean KL(pi' || pi) at the accepted step
  double surr_improvement = 0.0;
  double cost_change = 0.0;
};

/// Tries theta + coeff^j x for j = 0..steps-1. On rejection the policy is unchanged.
template <StochasticPolicy P>
LineSearchResult line_search(P& policy, const CpoDirection& dir, const PolicyBatch& batch, double c_slack,
                             const CpoConfig& cfg, double cost_scale = 1.0) {
  require(dir.x.allFinite(), "line_search: non-finite direction");
  const P old = policy;
  const Vector theta0 = policy.params();
  const SurrogateValues base = surrogate_values(old, batch, cost_scale);
  const bool need_improvement = dir.optim_case == CpoCase::Active || dir.optim_case == CpoCase::Inactive ||
                                dir.optim_case == CpoCase::Unconstrained;
  LineSearchResult res;
  double step = 1.0;
  for (int j = 0; j < cfg.backtrack_steps; ++j, step *= cfg.backtrack_coeff) {
    policy.set_params(theta0 + step * dir.x);
    const double kl = mean_kl(policy, old, batch.states);
    const SurrogateValues now = surrogate_values(policy, batch, cost_scale);
    const double improve = now.surr - base.surr;
    const double dcost = now.cost_surr - base.cost_surr;
    const bool ok = std::isfinite(kl) && kl <= cfg.target_kl && (!need_improvement || improve >= 0.0) &&
                    dcost <= std::max(-c_slack, 0.0);
    if (ok) {
      res = {true, j, kl, improve, dcost};
      return res;
    }
  }
  policy.set_params(theta0);
  res.backtracks = cfg.backtrack_steps;
  return res;
}

struct CpoUpdateRecord {
  CpoCase optim_case = CpoCase::Unconstrained;
  Vector b, x;
  double c_slack = 0.0;
  bool accepted = false;
  int backtracks = 0;
  double kl = 0.0;
  double surr_improvement = 0.0;
  double cost_change = 0.0;
  double g_norm = 0.0;
};

/// One full constrained update on a batch.
template <StochasticPolicy P>
CpoUpdateRecord cpo_update(P& policy, const PolicyBatch& batch, double jc_estimate, const CpoConfig& cfg,
                           double cost_scale = 1.0) {
  const auto grads = surrogate_grads(policy, batch, jc_estimate, cfg.cost_limit, cost_scale);
  const P frozen = policy;
  const LinearOperator H = [&](const Vector& v) {
    return fisher_vector_product(frozen, batch.states, v, cfg.cg_damping);
  };
  const CpoDirection dir = cpo_step(grads.g, grads.b, grads.c_slack, H, cfg);
  const LineSearchResult ls = line_search(policy, dir, batch, grads.c_slack, cfg, cost_scale);
  CpoUpdateRecord rec;
  rec.optim_case = dir.optim_case;
  rec.b = grads.b;
  rec.x = dir.x;
  rec.c_slack = grads.c_slack;
  rec.accepted = ls.accepted;
  rec.backtracks = ls.backtracks;
  rec.kl = ls.kl;
  rec.surr_improvement = ls.surr_improvement;
  rec.cost_change = ls.cost_change;
  rec.g_norm = grads.g.norm();
  return rec;
}

}  // namespace cmbpo

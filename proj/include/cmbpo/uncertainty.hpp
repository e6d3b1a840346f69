#pragma once

// Model-uncertainty accounting: closed-form Gaussian KL, average pairwise
// ensemble disagreement, budget calibration, the real-data mixing ratio and
// the per-step rollout gate.

#include "cmbpo/dynamics_model.hpp"

#include <cmath>
#include <functional>

namespace cmbpo {

struct UncertaintyBudget {
  double d_m = 0.0;   ///< limit on average model disagreement
  double d_H = 0.0;   ///< limit on cumulative disagreement per model trajectory
  double alpha = 1.0; ///< current fraction of real samples
  double beta = 2.0;  ///< Boltzmann temperature for start states
  double alpha0 = 0.5;
  int h0 = 5;
  double alpha_floor = 0.05;
  int max_horizon = 100;
  double initial_disagreement = 0.0;  ///< D-bar measured at calibration

  void validate() const {
    require(d_m > 0.0 && d_H > 0.0, "UncertaintyBudget: d_m and d_H must be positive");
    require(alpha >= 0.0 && alpha <= 1.0, "UncertaintyBudget: alpha outside [0, 1]");
  }
};

/// KL(N(mu_p, diag var_p) || N(mu_q, diag var_q)).
inline double gaussian_kl(const Eigen::Ref<const Vector>& mu_p, const Eigen::Ref<const Vector>& var_p,
                          const Eigen::Ref<const Vector>& mu_q, const Eigen::Ref<const Vector>& var_q) {
  require(mu_p.size() == var_p.size() && mu_q.size() == var_q.size() && mu_p.size() == mu_q.size(),
          "gaussian_kl: dimension mismatch");
  double kl = 0.0;
  for (Index k = 0; k < mu_p.size(); ++k) {
    if (!(var_p[k] > 0.0) || !(var_q[k] > 0.0)) throw InvalidArgument("gaussian_kl: nonpositive variance");
    const double ratio = var_p[k] / var_q[k];
    const double d = mu_q[k] - mu_p[k];
    kl += -std::log(ratio) - 1.0 + ratio + d * d / var_q[k];
  }
  return std::max(0.5 * kl, 0.0);
}

/// State part only; the reward head is not part of the transition distribution.
inline double gaussian_kl(const GaussianPrediction& p, const GaussianPrediction& q) {
  return gaussian_kl(p.mean, p.var, q.mean, q.var);
}

/// 1/(M(M-1)) sum_{m != n} KL(P_m || P_n).
inline double ensemble_disagreement(const std::vector<GaussianPrediction>& preds) {
  const std::size_t M = preds.size();
  if (M < 2) throw InvalidArgument("ensemble_disagreement: need at least two members");
  double total = 0.0;
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t n = 0; n < M; ++n)
      if (m != n) total += gaussian_kl(preds[m], preds[n]);
  return total / static_cast<double>(M * (M - 1));
}

/// Disagreement for every column of a batched prediction.
inline Vector ensemble_disagreement(const EnsemblePrediction& pred) {
  const Index M = pred.members();
  if (M < 2) throw InvalidArgument("ensemble_disagreement: need at least two members");
  Vector out(pred.size());
  std::vector<GaussianPrediction> col(static_cast<std::size_t>(M));
  for (Index j = 0; j < pred.size(); ++j) {
    for (Index m = 0; m < M; ++m) col[static_cast<std::size_t>(m)] = pred.member(m, j);
    out[j] = ensemble_disagreement(col);
  }
  return out;
}

inline double ensemble_disagreement(const EnsembleModel& model, const Vector& s, const Vector& a) {
  const auto pred = model.predict(s, a, model.disagreement_members());
  std::vector<GaussianPrediction> col;
  for (Index m = 0; m < pred.members(); ++m) col.push_back(pred.member(m, 0));
  return ensemble_disagreement(col);
}

/// Batch disagreement over the configured member set.
inline Vector ensemble_disagreement(const EnsembleModel& model, const Matrix& states, const Matrix& actions) {
  return ensemble_disagreement(model.predict(states, actions, model.disagreement_members()));
}

/// Smallest alpha in [alpha_floor, 1] with (1 - alpha) * mean_disagreement <= d_m,
/// exact in floating point.
inline double update_mixing(double mean_disagreement, UncertaintyBudget& budget) {
  require(mean_disagreement >= 0.0, "update_mixing: negative disagreement");
  double alpha = mean_disagreement > 0.0 ? std::max(0.0, 1.0 - budget.d_m / mean_disagreement) : 0.0;
  alpha = std::clamp(alpha, budget.alpha_floor, 1.0);
  while ((1.0 - alpha) * mean_disagreement > budget.d_m && alpha < 1.0) alpha = std::nextafter(alpha, 2.0);
  budget.alpha = alpha;
  return alpha;
}

/// Continue iff cumulative + next <= d_H.
inline bool horizon_gate(double cumulative, double next_step_uncertainty, const UncertaintyBudget& budget) {
  require(cumulative >= 0.0, "horizon_gate: negative cumulative uncertainty");
  return cumulative + next_step_uncertainty <= budget.d_H;
}

/// Maps a batch of states to a batch of actions.
using ActionSampler = std::function<Matrix(const Matrix& states, Rng& rng)>;
/// Termination test on (s, a, s'), column-wise.
using TerminalFn = std::function<bool(const Vector& s, const Vector& a, const Vector& s2)>;
/// Maps a predicted state back onto the valid state set.
using ProjectFn = std::function<Vector(const Vector& s)>;

struct CalibrationOptions {
  int n_rollouts = 200;
  bool single_rollout = false;  ///< use one rollout for d_H instead of the average
  TerminalFn terminal;
  ProjectFn project;
};

/// D-bar_0 over the buffer pairs, d_m = (1 - alpha0) D-bar_0 and d_H the mean
/// cumulative disagreement of h0-step model rollouts from buffer states.
inline UncertaintyBudget calibrate_budgets(const EnsembleModel& model, const Matrix& states, const Matrix& actions,
                                           const ActionSampler& policy, double alpha0, int h0, double beta,
                                           Rng& rng, const CalibrationOptions& opt = {}) {
  if (states.cols() == 0) throw DataError("calibrate_budgets: empty buffer");
  require(alpha0 >= 0.0 && alpha0 < 1.0, "calibrate_budgets: alpha0 must lie in [0, 1)");
  require(h0 >= 1, "calibrate_budgets: h0 must be positive");
  if (!model.trained()) throw DataError("calibrate_budgets: ensemble untrained");

  UncertaintyBudget budget;
  budget.alpha0 = alpha0;
  budget.alpha = alpha0;
  budget.h0 = h0;
  budget.beta = beta;
  const double d0 = ensemble_disagreement(model, states, actions).mean();
  budget.initial_disagreement = d0;
  budget.d_m = std::max((1.0 - alpha0) * d0, 1e-12);

  const int n = opt.single_rollout ? 1 : std::max(1, opt.n_rollouts);
  Matrix s(states.rows(), n);
  for (int i = 0; i < n; ++i) s.col(i) = states.col(static_cast<Index>(rng.index(static_cast<std::size_t>(states.cols()))));
  Vector total = Vector::Zero(n);
  std::vector<bool> alive(static_cast<std::size_t>(n), true);
  const auto& el = model.elites();
  for (int t = 0; t < h0; ++t) {
    const Matrix a = policy(s, rng);
    const auto pred = model.predict(s, a);
    const auto dis = ensemble_disagreement(model.predict(s, a, model.disagreement_members()));
    for (int i = 0; i < n; ++i) {
      if (!alive[static_cast<std::size_t>(i)]) continue;
      total[i] += dis[i];
      const Index m = el[rng.index(el.size())];
      Vector s2 = s.col(i) + pred.mean[static_cast<std::size_t>(m)].col(i);
      if (opt.project) s2 = opt.project(s2);
      if (opt.terminal && opt.terminal(s.col(i), a.col(i), s2)) alive[static_cast<std::size_t>(i)] = false;
      s.col(i) = s2;
    }
  }
  budget.d_H = std::max(total.mean(), 1e-12);
  return budget;
}

}  // namespace cmbpo

#pragma once

// Replay storage tagged by collecting policy, Boltzmann start-state weights,
// gated branched model rollouts and real/model batch mixing.

#include "cmbpo/dynamics_model.hpp"
#include "cmbpo/policy.hpp"
#include "cmbpo/uncertainty.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>

namespace cmbpo {

struct Transition {
  Vector s, a, s2;
  double r = 0.0;
  Vector c;  ///< one entry per cost signal
  bool terminal = false;
};

struct TaggedTrajectory {
  std::vector<Transition> steps;
  int policy_id = 0;
  double mean_kl_to_current = 0.0;
  int kl_cached_for = -1;  ///< policy id the cached KL refers to

  Index size() const { return static_cast<Index>(steps.size()); }
  bool ends_terminal() const { return !steps.empty() && steps.back().terminal; }

  void validate() const {
    for (std::size_t i = 0; i + 1 < steps.size(); ++i)
      require(!steps[i].terminal, "TaggedTrajectory: terminal flag before the last step");
  }
  Matrix states() const {
    Matrix out(steps.empty() ? 0 : steps.front().s.size(), size());
    for (Index i = 0; i < size(); ++i) out.col(i) = steps[static_cast<std::size_t>(i)].s;
    return out;
  }
};

/// FIFO store of real trajectories with one policy snapshot per policy id.
template <StochasticPolicy P>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(Index capacity = 1000000) : capacity_(capacity) {
    require(capacity >= 1, "ReplayBuffer: capacity must be positive");
  }

  void add(TaggedTrajectory traj, std::shared_ptr<const P> snapshot) {
    if (traj.steps.empty()) return;
    traj.validate();
    require(snapshot != nullptr, "ReplayBuffer: missing policy snapshot");
    require(traj.size() <= capacity_, "ReplayBuffer: trajectory longer than capacity");
    snapshots_[traj.policy_id] = std::move(snapshot);
    size_ += traj.size();
    trajs_.push_back(std::move(traj));
    while (size_ > capacity_) {
      size_ -= trajs_.front().size();
      trajs_.pop_front();
    }
    for (auto it = snapshots_.begin(); it != snapshots_.end();) {
      const bool used = std::any_of(trajs_.begin(), trajs_.end(), [&](const auto& t) { return t.policy_id == it->first; });
      it = used ? std::next(it) : snapshots_.erase(it);
    }
  }

  Index size() const { return size_; }
  Index capacity() const { return capacity_; }
  std::size_t n_trajectories() const { return trajs_.size(); }
  bool empty() const { return trajs_.empty(); }
  const std::deque<TaggedTrajectory>& trajectories() const { return trajs_; }
  std::deque<TaggedTrajectory>& trajectories() { return trajs_; }
  const P& snapshot(int policy_id) const { return *snapshots_.at(policy_id); }

  TransitionData transitions() const {
    TransitionData d;
    if (trajs_.empty()) return d;
    const auto& first = trajs_.front().steps.front();
    d.states.resize(first.s.size(), size_);
    d.actions.resize(first.a.size(), size_);
    d.next_states.resize(first.s2.size(), size_);
    d.rewards.resize(size_);
    Index j = 0;
    for (const auto& t : trajs_)
      for (const auto& x : t.steps) {
        d.states.col(j) = x.s;
        d.actions.col(j) = x.a;
        d.next_states.col(j) = x.s2;
        d.rewards[j] = x.r;
        ++j;
      }
    return d;
  }

 private:
  Index capacity_;
  Index size_ = 0;
  std::deque<TaggedTrajectory> trajs_;
  std::map<int, std::shared_ptr<const P>> snapshots_;
};

/// weight_k proportional to exp(-beta * mean_s KL(pi(.|s) || pi_k(.|s))) over
/// the states of trajectory k.
template <StochasticPolicy P>
Vector boltzmann_weights(ReplayBuffer<P>& buffer, const P& current, int current_id, double beta) {
  if (buffer.empty()) throw DataError("boltzmann_weights: empty buffer");
  const std::size_t n = buffer.n_trajectories();
  Vector logits(static_cast<Index>(n));
  std::size_t k = 0;
  for (auto& t : buffer.trajectories()) {
    if (t.policy_id == current_id) {
      t.mean_kl_to_current = 0.0;
    } else if (t.kl_cached_for != current_id) {
      t.mean_kl_to_current = current.kl(buffer.snapshot(t.policy_id), t.states()).mean();
    }
    t.kl_cached_for = current_id;
    logits[static_cast<Index>(k++)] = -beta * t.mean_kl_to_current;
  }
  logits.array() -= logits.maxCoeff();
  Vector w = logits.array().exp();
  return w / w.sum();
}

/// Weights from explicit mean KL values.
inline Vector boltzmann_weights(const Vector& mean_kl, double beta) {
  if (mean_kl.size() == 0) throw DataError("boltzmann_weights: empty buffer");
  Vector logits = -beta * mean_kl;
  logits.array() -= logits.maxCoeff();
  Vector w = logits.array().exp();
  return w / w.sum();
}

enum class StopCause { Terminal, Gate, MaxHorizon };

inline std::string stop_cause_name(StopCause c) {
  switch (c) {
    case StopCause::Terminal: return "terminal";
    case StopCause::Gate: return "gate";
    case StopCause::MaxHorizon: return "max_horizon";
  }
  return "?";
}

struct ModelTrajectory {
  Matrix states;        ///< (sdim x T+1), the last column is the final state
  Matrix actions;       ///< (adim x T)
  Vector rewards, costs, disagreement;
  std::vector<Index> members;
  bool terminal = false;
  StopCause cause = StopCause::Gate;
  Index length() const { return actions.cols(); }
};

using CostFn = std::function<double(const Vector& s, const Vector& a, const Vector& s2)>;

struct RolloutOptions {
  int n_rollouts = 1000;
  CostFn cost;
  TerminalFn terminal;
  ProjectFn project;
};

struct RolloutStats {
  double mean_horizon = 0.0;
  Index max_horizon = 0;
  Index transitions = 0;
  std::map<std::string, int> causes;
};

inline RolloutStats rollout_stats(const std::vector<ModelTrajectory>& trajs) {
  RolloutStats st;
  for (const auto& t : trajs) {
    st.transitions += t.length();
    st.max_horizon = std::max(st.max_horizon, t.length());
    ++st.causes[stop_cause_name(t.cause)];
  }
  st.mean_horizon = trajs.empty() ? 0.0 : static_cast<double>(st.transitions) / static_cast<double>(trajs.size());
  return st;
}

/// Columns of pred belonging to the listed member positions.
inline EnsemblePrediction select_members(const EnsemblePrediction& pred, const std::vector<Index>& which) {
  EnsemblePrediction out;
  for (Index m : which) {
    const auto um = static_cast<std::size_t>(m);
    out.mean.push_back(pred.mean[um]);
    out.var.push_back(pred.var[um]);
    out.reward_mean.push_back(pred.reward_mean[um]);
    out.reward_var.push_back(pred.reward_var[um]);
  }
  return out;
}

/// Start states: a trajectory by Boltzmann weight, then a uniform state in it.
template <StochasticPolicy P>
Matrix sample_start_states(ReplayBuffer<P>& buffer, const P& current, int current_id, double beta, int n, Rng& rng) {
  const Vector w = boltzmann_weights(buffer, current, current_id, beta);
  const auto& trajs = buffer.trajectories();
  Matrix out(trajs.front().steps.front().s.size(), n);
  for (int i = 0; i < n; ++i) {
    const auto& t = trajs[rng.categorical(w)];
    out.col(i) = t.steps[rng.index(t.steps.size())].s;
  }
  return out;
}

/// Model rollouts from the given start states. A step is taken only while the
/// cumulative disagreement including it stays within d_H.
template <StochasticPolicy P>
std::vector<ModelTrajectory> rollouts_from(const EnsembleModel& model, const P& policy, const Matrix& starts,
                                           const UncertaintyBudget& budget, const RolloutOptions& opt, Rng& rng) {
  if (!model.trained()) throw DataError("branched_rollouts: ensemble untrained");
  const Index n = starts.cols();
  const Index sdim = model.state_dim(), adim = model.action_dim();
  std::vector<std::vector<Vector>> S(static_cast<std::size_t>(n)), A(static_cast<std::size_t>(n));
  std::vector<std::vector<double>> R(static_cast<std::size_t>(n)), C(static_cast<std::size_t>(n)),
      D(static_cast<std::size_t>(n));
  std::vector<ModelTrajectory> out(static_cast<std::size_t>(n));
  std::vector<double> cum(static_cast<std::size_t>(n), 0.0);
  std::vector<Index> active(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    active[static_cast<std::size_t>(i)] = i;
    S[static_cast<std::size_t>(i)].push_back(starts.col(i));
  }
  const auto dis_members = model.disagreement_members();
  const auto& el = model.elites();
  for (int t = 0; t < budget.max_horizon && !active.empty(); ++t) {
    Matrix s(sdim, static_cast<Index>(active.size()));
    for (std::size_t j = 0; j < active.size(); ++j) s.col(static_cast<Index>(j)) = S[static_cast<std::size_t>(active[j])].back();
    const Matrix a = policy.sample(s, rng);
    const auto pred = model.predict(s, a);
    const Vector dis = ensemble_disagreement(select_members(pred, dis_members));
    std::vector<Index> still;
    for (std::size_t j = 0; j < active.size(); ++j) {
      const auto i = static_cast<std::size_t>(active[j]);
      const auto jj = static_cast<Index>(j);
      if (!horizon_gate(cum[i], dis[jj], budget)) {
        out[i].cause = StopCause::Gate;
        continue;
      }
      const Index m = el[rng.index(el.size())];
      Vector s2 = s.col(jj) + pred.mean[static_cast<std::size_t>(m)].col(jj);
      if (opt.project) s2 = opt.project(s2);
      const Vector aj = a.col(jj);
      A[i].push_back(aj);
      R[i].push_back(pred.reward_mean[static_cast<std::size_t>(m)][jj]);
      C[i].push_back(opt.cost ? opt.cost(s.col(jj), aj, s2) : 0.0);
      D[i].push_back(dis[jj]);
      out[i].members.push_back(m);
      cum[i] += dis[jj];
      const bool term = opt.terminal && opt.terminal(s.col(jj), aj, s2);
      S[i].push_back(std::move(s2));
      if (term) {
        out[i].terminal = true;
        out[i].cause = StopCause::Terminal;
      } else if (t + 1 == budget.max_horizon) {
        out[i].cause = StopCause::MaxHorizon;
      } else {
        still.push_back(active[j]);
      }
    }
    active.swap(still);
  }
  for (Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    auto& tr = out[ui];
    const auto T = static_cast<Index>(A[ui].size());
    tr.states.resize(sdim, T + 1);
    for (Index k = 0; k <= T; ++k) tr.states.col(k) = S[ui][static_cast<std::size_t>(k)];
    tr.actions.resize(adim, T);
    for (Index k = 0; k < T; ++k) tr.actions.col(k) = A[ui][static_cast<std::size_t>(k)];
    tr.rewards = to_vector(R[ui]);
    tr.costs = to_vector(C[ui]);
    tr.disagreement = to_vector(D[ui]);
  }
  return out;
}

template <StochasticPolicy P>
std::vector<ModelTrajectory> branched_rollouts(const EnsembleModel& model, const P& policy, int policy_id,
                                               ReplayBuffer<P>& buffer, const UncertaintyBudget& budget,
                                               const RolloutOptions& opt, Rng& rng) {
  if (buffer.empty()) throw DataError("branched_rollouts: empty buffer");
  if (!model.trained()) throw DataError("branched_rollouts: ensemble untrained");
  const Matrix starts = sample_start_states(buffer, policy, policy_id, budget.beta, opt.n_rollouts, rng);
  return rollouts_from(model, policy, starts, budget, opt, rng);
}

/// ceil(alpha * batch_size) draws from real and the rest from model, shuffled.
/// Sources shorter than their quota are resampled with replacement; an empty
/// source hands its quota to the other one.
template <class T>
std::vector<T> mix_batches(const std::vector<T>& real, const std::vector<T>& model, double alpha, int batch_size,
                           Rng& rng) {
  require(alpha >= 0.0 && alpha <= 1.0, "mix_batches: alpha outside [0, 1]");
  require(batch_size >= 0, "mix_batches: negative batch size");
  if (real.empty() && model.empty()) throw DataError("mix_batches: both sources empty");
  auto n_real = static_cast<std::size_t>(std::ceil(alpha * batch_size));
  n_real = std::min<std::size_t>(n_real, static_cast<std::size_t>(batch_size));
  std::size_t n_model = static_cast<std::size_t>(batch_size) - n_real;
  if (real.empty()) {
    n_model += n_real;
    n_real = 0;
  } else if (model.empty()) {
    n_real += n_model;
    n_model = 0;
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  auto draw = [&](const std::vector<T>& src, std::size_t k) {
    if (k <= src.size()) {
      const auto perm = rng.permutation(src.size());
      for (std::size_t i = 0; i < k; ++i) out.push_back(src[perm[i]]);
    } else {
      for (std::size_t i = 0; i < k; ++i) out.push_back(src[rng.index(src.size())]);
    }
  };
  draw(real, n_real);
  draw(model, n_model);
  const auto perm = rng.permutation(out.size());
  std::vector<T> shuffled;
  shuffled.reserve(out.size());
  for (std::size_t i : perm) shuffled.push_back(std::move(out[i]));
  return shuffled;
}

}  // namespace cmbpo

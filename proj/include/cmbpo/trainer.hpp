#pragma once

// Epoch loop for constrained model-based policy optimisation and its
// model-free baseline. One master seed feeds every random consumer.

#include "cmbpo/config.hpp"
#include "cmbpo/cpo.hpp"
#include "cmbpo/gae.hpp"
#include "cmbpo/metrics.hpp"
#include "cmbpo/rollout.hpp"

#include <filesystem>
#include <iomanip>
#include <optional>

namespace cmbpo {

/// Task-specific pieces the loop cannot derive from the Environment concept.
template <class E, class P>
struct Task {
  E env;
  std::function<P(Rng&)> make_policy;
  FeatureMap value_features;  ///< empty means raw states
  Index value_input_dim = 0;
  std::vector<Index> value_hidden;
  std::function<std::optional<ExactReturns>(const P&)> exact;  ///< optional exact evaluation
};

/// Everything a test or tool may want to inspect after a policy update
/// (one per epoch unless policy_updates > 1).
template <class P>
struct EpochView {
  const EpochMetrics& metrics;
  const ExperimentConfig& config;
  const UncertaintyBudget* budget;  ///< null for the model-free baseline
  const EnsembleModel* ensemble;    ///< null for the model-free baseline
  const std::vector<ModelTrajectory>& model_trajectories;
  const P& policy_before;
  const P& policy_after;
  const PolicyBatch& batch;
  const CpoUpdateRecord& update;
};

template <class P>
using EpochObserver = std::function<void(const EpochView<P>&)>;

namespace detail {

struct Sample {
  Vector s, a;
  double adv = 0.0, cadv = 0.0, ret = 0.0, cret = 0.0;
};

struct EpisodeSummary {
  double ret = 0.0, cost = 0.0, disc_cost = 0.0;
  int length = 0;
};

template <Environment E, StochasticPolicy P>
TaggedTrajectory run_episode(const E& env, const P& pi, int policy_id, double gamma_c, Rng& rng, EpisodeSummary& sum) {
  TaggedTrajectory traj;
  traj.policy_id = policy_id;
  Vector s = env.reset(rng);
  double disc = 1.0;
  sum = {};
  for (int t = 0; t < env.horizon(); ++t) {
    const Vector a = pi.sample(Matrix(s), rng).col(0);
    const StepResult out = env.step(s, a, rng);
    if (!out.next_state.allFinite() || !std::isfinite(out.reward)) throw NumericalError("environment produced non-finite values");
    traj.steps.push_back({s, a, out.next_state, out.reward, Vector::Constant(1, out.cost), out.terminal});
    sum.ret += out.reward;
    sum.cost += out.cost;
    sum.disc_cost += disc * out.cost;
    disc *= gamma_c;
    ++sum.length;
    s = out.next_state;
    if (out.terminal) break;
  }
  return traj;
}

/// GAE for both signals over one trajectory given as columns.
inline void append_samples(const Matrix& states, const Matrix& actions, const Vector& rewards, const Vector& costs,
                           const Vector& final_state, bool terminal, const ValueFunction& vf, const ValueFunction& vc,
                           const CpoConfig& cfg, std::vector<Sample>& out) {
  const Index T = actions.cols();
  if (T == 0) return;
  const Vector v = vf.predict(states), w = vc.predict(states);
  const double boot_v = terminal ? 0.0 : vf.predict(final_state);
  const double boot_c = terminal ? 0.0 : vc.predict(final_state);
  const GaeResult ret = gae_advantages(rewards, v, boot_v, cfg.gamma, cfg.lambda);
  const GaeResult cst = gae_advantages(costs, w, boot_c, cfg.gamma_c, cfg.lambda_c);
  for (Index t = 0; t < T; ++t)
    out.push_back({states.col(t), actions.col(t), ret.advantages[t], cst.advantages[t], ret.targets[t], cst.targets[t]});
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace detail

template <Environment E, StochasticPolicy P>
class Trainer {
 public:
  Trainer(ExperimentConfig cfg, Task<E, P> task, std::string out_dir)
      : cfg_(std::move(cfg)), task_(std::move(task)), out_(std::move(out_dir)), master_(cfg_.seed) {
    cfg_.validate();
    env_rng_ = master_.split();
    act_rng_ = master_.split();
    Rng init_rng = master_.split();
    model_rng_ = master_.split();
    rollout_rng_ = master_.split();
    batch_rng_ = master_.split();
    Rng value_rng = master_.split();
    model_seed_ = master_.next_u64();
    policy_ = task_.make_policy(init_rng);
    vf_ = ValueFunction(task_.value_input_dim, task_.value_hidden, value_rng, cfg_.value_fit.learn_rate, task_.value_features);
    vc_ = ValueFunction(task_.value_input_dim, task_.value_hidden, value_rng, cfg_.value_fit.learn_rate, task_.value_features);
    buffer_ = ReplayBuffer<P>(cfg_.buffer_capacity);
  }

  void set_observer(EpochObserver<P> obs) { observer_ = std::move(obs); }
  const P& policy() const { return policy_; }
  const std::optional<EnsembleModel>& ensemble() const { return model_; }

  std::vector<EpochMetrics> run() {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_) / "checkpoints");
    {
      std::ofstream cf(fs::path(out_) / "config.txt");
      write_config(cf, cfg_);
    }
    MetricsWriter writer(out_);
    std::vector<EpochMetrics> history;
    int epoch = 0;
    try {
      if (cfg_.epochs > 0 && model_based()) setup_model();
      for (epoch = 1; epoch <= cfg_.epochs; ++epoch) {
        history.push_back(run_epoch(epoch));
        writer.write(history.back());
        if (epoch % cfg_.checkpoint_every == 0 || epoch == cfg_.epochs) checkpoint(epoch);
      }
    } catch (const NumericalError& e) {
      nlohmann::ordered_json d;
      d["epoch"] = epoch;
      d["error"] = e.what();
      d["config"] = cfg_.to_map();
      if (!history.empty()) d["last_metrics"] = history.back().to_json();
      d["policy"] = policy_.to_json();
      detail::write_json(fs::path(out_) / "diagnostic.json", d);
      throw;
    }
    if (cfg_.epochs == 0) checkpoint(0);
    write_meta(static_cast<int>(history.size()));
    return history;
  }

 private:
  bool model_based() const { return cfg_.algo == "cmbpo"; }

  void collect(int steps, int policy_id, std::shared_ptr<const P> snapshot, std::vector<TaggedTrajectory>& fresh,
               std::vector<detail::EpisodeSummary>& sums) {
    int taken = 0;
    while (taken < steps) {
      detail::EpisodeSummary s;
      auto traj = detail::run_episode(task_.env, policy_, policy_id, cfg_.cpo.gamma_c, act_rng_, s);
      taken += s.length;
      env_steps_ += s.length;
      cum_cost_ += s.cost;
      sums.push_back(s);
      if (model_based()) buffer_.add(traj, snapshot);
      fresh.push_back(std::move(traj));
    }
  }

  std::vector<detail::Sample> real_samples(const std::vector<TaggedTrajectory>& trajs, const CpoConfig& gae) const {
    std::vector<detail::Sample> out;
    for (const auto& t : trajs) {
      const Index T = t.size();
      Matrix S(task_.env.state_dim(), T), A(task_.env.action_dim(), T);
      Vector r(T), c(T);
      for (Index i = 0; i < T; ++i) {
        const auto& x = t.steps[static_cast<std::size_t>(i)];
        S.col(i) = x.s;
        A.col(i) = x.a;
        r[i] = x.r;
        c[i] = x.c[0];
      }
      detail::append_samples(S, A, r, c, t.steps.back().s2, t.ends_terminal(), vf_, vc_, gae, out);
    }
    return out;
  }

  /// Monte Carlo value targets on the initial data, so the first update
  /// does not run on untrained critics.
  void prefit_values(const std::vector<TaggedTrajectory>& trajs) {
    CpoConfig mc = cfg_.cpo;
    mc.lambda = mc.lambda_c = 1.0;
    const auto samples = real_samples(trajs, mc);
    const auto n = static_cast<Index>(samples.size());
    Matrix S(task_.env.state_dim(), n);
    Vector ret(n), cret(n);
    for (Index i = 0; i < n; ++i) {
      S.col(i) = samples[static_cast<std::size_t>(i)].s;
      ret[i] = samples[static_cast<std::size_t>(i)].ret;
      cret[i] = samples[static_cast<std::size_t>(i)].cret;
    }
    value_fit(vf_, S, ret, cfg_.value_fit, batch_rng_);
    value_fit(vc_, S, cret, cfg_.value_fit, batch_rng_);
  }

  void train_model() {
    const auto m = train_ensemble(*model_, buffer_.transitions(), model_rng_);
    double h = 0.0;
    for (Index e : model_->elites()) h += m.holdout_final[static_cast<std::size_t>(e)];
    last_holdout_ = h / static_cast<double>(model_->elites().size());
  }

  RolloutOptions rollout_options(int n) const {
    RolloutOptions o;
    o.n_rollouts = n;
    const E* env = &task_.env;
    o.cost = [env](const Vector& s, const Vector& a, const Vector& s2) { return env->cost(s, a, s2); };
    o.terminal = [env](const Vector& s, const Vector& a, const Vector& s2) { return env->terminal(s, a, s2); };
    o.project = [env](const Vector& s) { return env->project(s); };
    return o;
  }

  void setup_model() {
    auto snapshot = std::make_shared<const P>(policy_);
    std::vector<TaggedTrajectory> fresh;
    std::vector<detail::EpisodeSummary> sums;
    collect(cfg_.init_steps, 0, snapshot, fresh, sums);
    if (cfg_.prefit_values && !fresh.empty()) prefit_values(fresh);
    model_.emplace(task_.env.state_dim(), task_.env.action_dim(), cfg_.ensemble, model_seed_);
    train_model();
    const auto data = buffer_.transitions();
    CalibrationOptions opt;
    opt.n_rollouts = cfg_.calib_rollouts;
    opt.single_rollout = cfg_.calib_single;
    const auto ro = rollout_options(0);
    opt.terminal = ro.terminal;
    opt.project = ro.project;
    const P* pi = &policy_;
    ActionSampler sampler = [pi](const Matrix& s, Rng& r) { return pi->sample(s, r); };
    budget_ = calibrate_budgets(*model_, data.states, data.actions, sampler, cfg_.alpha0, cfg_.h0, cfg_.beta,
                                rollout_rng_, opt);
    budget_.alpha_floor = cfg_.alpha_floor;
    budget_.max_horizon = cfg_.max_horizon;
  }

  EpochMetrics run_epoch(int epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    auto snapshot = std::make_shared<const P>(policy_);
    std::vector<TaggedTrajectory> fresh;
    std::vector<detail::EpisodeSummary> sums;
    collect(cfg_.steps_per_epoch, epoch, snapshot, fresh, sums);
    m.episodes = static_cast<int>(sums.size());
    for (const auto& s : sums) {
      m.mean_return += s.ret / static_cast<double>(sums.size());
      m.mean_cost += s.cost / static_cast<double>(sums.size());
      m.jc_estimate += s.disc_cost / static_cast<double>(sums.size());
    }
    m.env_steps = env_steps_;
    m.cum_cost = cum_cost_;

    if (model_based() && (epoch - 1) % cfg_.model_train_every == 0) train_model();

    // Cost slack in the units of the discounted per-step cost surrogate.
    CpoConfig cpo = cfg_.cpo;
    const double cost_scale = 1.0 / (1.0 - cfg_.cpo.gamma_c);
    double jc = m.jc_estimate;
    const double target = cfg_.cost_limit - cfg_.cost_margin;
    if (cfg_.cost_mode == CostMode::Undiscounted) {
      const double per_step = static_cast<double>(task_.env.horizon()) * (1.0 - cfg_.cpo.gamma_c);
      jc = m.mean_cost / per_step;
      cpo.cost_limit = target / per_step;
    } else {
      cpo.cost_limit = target;
    }

    const int updates = model_based() ? cfg_.policy_updates : 1;
    for (int u = 0; u < updates; ++u) {
      std::vector<ModelTrajectory> model_trajs;
      if (model_based()) {
        const Matrix starts = sample_start_states(buffer_, policy_, epoch, cfg_.beta, cfg_.probe_samples, rollout_rng_);
        const Matrix acts = policy_.sample(starts, rollout_rng_);
        m.dbar = ensemble_disagreement(*model_, starts, acts).mean();
        update_mixing(m.dbar, budget_);
        model_trajs = branched_rollouts(*model_, policy_, epoch, buffer_, budget_, rollout_options(cfg_.model_rollouts),
                                        rollout_rng_);
        const auto st = rollout_stats(model_trajs);
        m.mean_horizon = st.mean_horizon;
        m.max_horizon = st.max_horizon;
        m.model_samples = st.transitions;
        m.alpha = budget_.alpha;
        m.d_m = budget_.d_m;
        m.d_H = budget_.d_H;
        m.model_holdout = last_holdout_;
      }

      std::vector<detail::Sample> real = real_samples(fresh, cfg_.cpo), synthetic;
      for (const auto& t : model_trajs) {
        if (t.length() == 0) continue;
        detail::append_samples(t.states.leftCols(t.length()), t.actions, t.rewards, t.costs, t.states.col(t.length()),
                               t.terminal, vf_, vc_, cfg_.cpo, synthetic);
      }
      const auto samples =
          model_based() ? mix_batches(real, synthetic, budget_.alpha, cfg_.policy_batch, batch_rng_) : real;

      const auto n = static_cast<Index>(samples.size());
      PolicyBatch batch;
      batch.states.resize(task_.env.state_dim(), n);
      batch.actions.resize(task_.env.action_dim(), n);
      Vector adv(n), cadv(n), ret(n), cret(n);
      for (Index i = 0; i < n; ++i) {
        const auto& x = samples[static_cast<std::size_t>(i)];
        batch.states.col(i) = x.s;
        batch.actions.col(i) = x.a;
        adv[i] = x.adv;
        cadv[i] = x.cadv;
        ret[i] = x.ret;
        cret[i] = x.cret;
      }
      batch.advantages = normalize_advantages(adv);
      batch.cost_advantages = cadv;
      batch.old_log_prob = policy_.log_prob(batch.states, batch.actions);

      const P before = policy_;
      const CpoUpdateRecord rec = cpo_update(policy_, batch, jc, cpo, cost_scale);
      m.cpo_case = case_label(rec.optim_case);
      m.accepted = rec.accepted;
      m.backtracks = rec.backtracks;
      m.policy_kl = rec.accepted ? rec.kl : 0.0;
      m.surr_improvement = rec.surr_improvement;
      m.cost_change = rec.cost_change;
      // Later updates in the same epoch see the cost moved by the surrogate change.
      if (rec.accepted) jc += rec.cost_change;

      value_fit(vf_, batch.states, ret, cfg_.value_fit, batch_rng_);
      value_fit(vc_, batch.states, cret, cfg_.value_fit, batch_rng_);

      if (observer_) {
        const EpochView<P> view{m, cfg_, model_based() ? &budget_ : nullptr, model_ ? &*model_ : nullptr,
                                model_trajs, before, policy_, batch, rec};
        observer_(view);
      }
    }

    if (task_.exact)
      if (const auto ex = task_.exact(policy_)) {
        m.exact_return = ex->reward;
        m.exact_cost = ex->cost;
      }
    return m;
  }

  void checkpoint(int epoch) const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["policy"] = policy_.to_json();
    if (model_ && model_->trained()) j["ensemble"] = model_->to_json();
    std::ostringstream name;
    name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".json";
    detail::write_json(std::filesystem::path(out_) / "checkpoints" / name.str(), j);
  }

  void write_meta(int epochs_done) const {
    nlohmann::ordered_json j;
    j["env"] = cfg_.env;
    j["algo"] = cfg_.algo;
    j["seed"] = cfg_.seed;
    j["epochs"] = epochs_done;
    j["cost_limit"] = cfg_.cost_limit;
    j["cost_mode"] = cfg_.cost_mode == CostMode::Discounted ? "discounted" : "undiscounted";
    j["horizon"] = task_.env.horizon();
    j["env_steps"] = env_steps_;
    j["cum_cost"] = cum_cost_;
    if (model_based() && model_) {
      j["d_m"] = budget_.d_m;
      j["d_H"] = budget_.d_H;
      j["initial_disagreement"] = budget_.initial_disagreement;
    }
    detail::write_json(std::filesystem::path(out_) / "meta.json", j);
  }

  ExperimentConfig cfg_;
  Task<E, P> task_;
  std::string out_;
  Rng master_, env_rng_, act_rng_, model_rng_, rollout_rng_, batch_rng_;
  std::uint64_t model_seed_ = 0;
  P policy_;
  ValueFunction vf_, vc_;
  ReplayBuffer<P> buffer_;
  std::optional<EnsembleModel> model_;
  UncertaintyBudget budget_;
  double last_holdout_ = 0.0;
  long long env_steps_ = 0;
  double cum_cost_ = 0.0;
  EpochObserver<P> observer_;
};

// ------------------------------------------------------------------ tasks

inline Task<GridworldEnv, SoftmaxTablePolicy> gridworld_task(const ExperimentConfig& cfg) {
  GridworldSpec spec = cfg.grid;
  spec.cost_limit = cfg.cost_limit;
  GridworldEnv env(spec);
  Task<GridworldEnv, SoftmaxTablePolicy> t{env, {}, {}, env.layout().n_states(), {}, {}};
  t.make_policy = [env](Rng&) { return env.make_policy(); };
  t.value_features = [env](const Matrix& S) { return env.one_hot_features(S); };
  const TabularCMDP cmdp = env.cmdp();
  t.exact = [cmdp](const SoftmaxTablePolicy& pi) -> std::optional<ExactReturns> {
    return exact_returns(cmdp, PolicyTable(pi.table()));
  };
  return t;
}

inline Task<PointCircleEnv, GaussianMlpPolicy> point_circle_task(const ExperimentConfig& cfg) {
  PointCircleSpec spec = cfg.circle;
  spec.cost_limit = cfg.cost_limit;
  PointCircleEnv env(spec);
  Task<PointCircleEnv, GaussianMlpPolicy> t{env, {}, {}, env.state_dim(), cfg.value_hidden, {}};
  const auto hidden = cfg.policy_hidden;
  const double log_std = cfg.init_log_std;
  t.make_policy = [hidden, log_std](Rng& rng) { return GaussianMlpPolicy(4, 2, hidden, log_std, rng); };
  return t;
}

/// Runs the configured task; writes config.txt, metrics, checkpoints and meta.json into out_dir.
inline std::vector<EpochMetrics> train(const ExperimentConfig& cfg, const std::string& out_dir) {
  if (cfg.env == "gridworld") return Trainer(cfg, gridworld_task(cfg), out_dir).run();
  if (cfg.env == "point_circle") return Trainer(cfg, point_circle_task(cfg), out_dir).run();
  throw InvalidArgument("unknown env '" + cfg.env + "'");
}

}  // namespace cmbpo

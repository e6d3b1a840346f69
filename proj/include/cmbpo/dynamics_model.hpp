#pragma once

// Probabilistic ensemble dynamics model. Each member maps a normalized
// (state, action) pair to a diagonal Gaussian over the normalized target
// [delta_state; reward]. Rollouts use the member means only.

#include "cmbpo/common.hpp"
#include "cmbpo/mlp.hpp"
#include "cmbpo/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

namespace cmbpo {

inline constexpr double kVarFloor = 1e-8;
inline constexpr double kVarCeil = 1e4;

/// Diagonal Gaussian over the next-state change plus a scalar reward.
struct GaussianPrediction {
  Vector mean;  ///< state-delta mean
  Vector var;   ///< state-delta variances, all > 0
  double reward_mean = 0.0;
  double reward_var = 1.0;
};

/// Per-feature affine standardisation.
struct Normalizer {
  Vector mean;
  Vector std;

  static Normalizer identity(Index dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

  /// Fits on the columns of x. Features with (near) zero spread keep unit scale.
  static Normalizer fit(const Matrix& x) {
    require(x.cols() >= 1, "Normalizer: no samples");
    Normalizer n;
    n.mean = x.rowwise().mean();
    n.std = ((x.colwise() - n.mean).array().square().rowwise().mean()).sqrt().matrix();
    for (Index i = 0; i < n.std.size(); ++i)
      if (!(n.std[i] > 1e-12)) n.std[i] = 1.0;
    return n;
  }

  Index dim() const { return mean.size(); }
  Matrix normalize(const Matrix& x) const {
    return ((x.colwise() - mean).array().colwise() / std.array()).matrix();
  }
  Matrix denormalize(const Matrix& x) const {
    return ((x.array().colwise() * std.array()).matrix()).colwise() + mean;
  }
};

/// Smooth positivity map with clamping; returns derivative 0 where clamped.
inline double softplus_clamped(double x, double* deriv = nullptr) {
  const double sp = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  if (sp < kVarFloor || sp > kVarCeil) {
    if (deriv) *deriv = 0.0;
    return std::clamp(sp, kVarFloor, kVarCeil);
  }
  if (deriv) *deriv = 1.0 / (1.0 + std::exp(-x));
  return sp;
}

/// Mean and variance heads in normalized target units, (target_dim x N) each.
struct HeadOutput {
  Matrix mean;
  Matrix var;
  Matrix var_deriv;  ///< d var / d raw
};

/// One ensemble member: an Mlp whose output stacks [mean; raw variance].
class ProbabilisticNet {
 public:
  ProbabilisticNet() = default;
  ProbabilisticNet(Index input_dim, Index target_dim, const std::vector<Index>& hidden, Activation act)
      : target_dim_(target_dim), net_(input_dim, hidden, 2 * target_dim, act) {}

  Index input_dim() const { return net_.in_dim(); }
  Index target_dim() const { return target_dim_; }
  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }

  /// Random weights, except the variance head starts input-independent at
  /// unit variance. Its gradient scales with the variance itself, so any
  /// spread left by a random init decays very slowly and drags the mean
  /// variance below the squared error it is regressing on.
  void init(Rng& rng) {
    net_.init(rng);
    const Index last = net_.n_layers() - 1;
    net_.weight(last).bottomRows(target_dim_).setZero();
    net_.bias(last).tail(target_dim_).setConstant(std::log(std::expm1(1.0)));
  }

  HeadOutput heads(const Matrix& x, MlpCache* cache = nullptr) const {
    const Matrix out = cache ? net_.forward(x, *cache) : net_.forward(x);
    HeadOutput h;
    h.mean = out.topRows(target_dim_);
    h.var.resize(target_dim_, out.cols());
    h.var_deriv.resize(target_dim_, out.cols());
    for (Index j = 0; j < out.cols(); ++j)
      for (Index k = 0; k < target_dim_; ++k)
        h.var(k, j) = softplus_clamped(out(target_dim_ + k, j), &h.var_deriv(k, j));
    return h;
  }

 private:
  Index target_dim_ = 0;
  Mlp net_;
};

/// Elementwise squared error (mean - y)^2 in normalized units; the variance
/// head's regression target.
inline Matrix squared_error_target(const ProbabilisticNet& net, const Matrix& x, const Matrix& y) {
  return (net.heads(x).mean - y).array().square().matrix();
}

/// Mean over the batch of sum_k (mu_k - y_k)^2 + (var_k - SE_k)^2 with
/// SE_k = (mu_k - y_k)^2 held constant. frozen_se replaces SE when given
/// (finite-difference checks evaluate the loss with SE fixed).
inline double model_loss(const ProbabilisticNet& net, const Matrix& x, const Matrix& y, Vector* grad = nullptr,
                         const Matrix* frozen_se = nullptr) {
  require(x.cols() >= 1, "model_loss: empty batch");
  require(x.cols() == y.cols() && y.rows() == net.target_dim(), "model_loss: batch shape mismatch");
  MlpCache cache;
  const HeadOutput h = net.heads(x, grad ? &cache : nullptr);
  const Matrix err = h.mean - y;
  const Matrix se = frozen_se ? *frozen_se : Matrix(err.array().square().matrix());
  const Matrix verr = h.var - se;
  const double n = static_cast<double>(x.cols());
  const double loss = (err.squaredNorm() + verr.squaredNorm()) / n;
  if (grad) {
    Matrix d_out(2 * net.target_dim(), x.cols());
    d_out.topRows(net.target_dim()) = 2.0 * err / n;
    d_out.bottomRows(net.target_dim()) = (2.0 * verr.array() * h.var_deriv.array() / n).matrix();
    *grad = net.net().backward(cache, d_out);
  }
  return loss;
}

struct EnsembleConfig {
  int members = 7;
  int elites = 5;
  std::vector<Index> hidden{200, 200, 200, 200};
  Activation activation = Activation::Swish;
  double learn_rate = 1e-3;
  int batch_size = 2048;
  double holdout_fraction = 0.1;
  int patience = 5;
  int max_epochs = 100;
  int max_batches_per_epoch = 0;  ///< 0 = full pass
  int min_transitions = 0;        ///< 0 = 2 * batch_size
  bool warm_start = true;
  bool disagreement_all_members = true;
  int threads = 1;
  /// Short second-moment memory: the variance-head gradient shrinks like
  /// var^2 as it converges, and a long memory stalls it far above the noise.
  double adam_beta2 = 0.99;
  /// Lower bound on predicted variance in normalized units, applied at
  /// prediction time. On near-deterministic systems the learned variance
  /// collapses and KL disagreement then blows up on tiny mean differences.
  double min_variance = 0.0;
};

/// Transitions as columns.
struct TransitionData {
  Matrix states, actions, next_states;
  Vector rewards;
  Index size() const { return states.cols(); }
};

/// Member predictions for a batch, in original units.
struct EnsemblePrediction {
  std::vector<Matrix> mean;  ///< state-delta means, one (sdim x N) per member
  std::vector<Matrix> var;
  std::vector<Vector> reward_mean;
  std::vector<Vector> reward_var;
  Index members() const { return static_cast<Index>(mean.size()); }
  Index size() const { return mean.empty() ? 0 : mean.front().cols(); }

  GaussianPrediction member(Index m, Index j) const {
    const auto um = static_cast<std::size_t>(m);
    return {mean[um].col(j), var[um].col(j), reward_mean[um][j], reward_var[um][j]};
  }
};

struct TrainingMetrics {
  std::vector<double> holdout_initial;  ///< per member, before the first epoch
  std::vector<double> holdout_final;    ///< per member, at the kept parameters
  std::vector<int> epochs_run;
  std::vector<std::vector<double>> holdout_history;
  double train_loss = 0.0;
};

class EnsembleModel {
 public:
  EnsembleModel() = default;
  EnsembleModel(Index state_dim, Index action_dim, EnsembleConfig cfg, std::uint64_t seed)
      : sdim_(state_dim), adim_(action_dim), cfg_(std::move(cfg)) {
    require(state_dim >= 1 && action_dim >= 1, "EnsembleModel: dimensions must be positive");
    require(cfg_.members >= 1, "EnsembleModel: need at least one member");
    require(cfg_.elites >= 1 && cfg_.elites <= cfg_.members, "EnsembleModel: need 1 <= elites <= members");
    Rng master(seed);
    for (int m = 0; m < cfg_.members; ++m) {
      members_.emplace_back(sdim_ + adim_, sdim_ + 1, cfg_.hidden, cfg_.activation);
      seeds_.push_back(master.next_u64());
      Rng init(seeds_.back());
      members_.back().init(init);
      optimizers_.emplace_back(members_.back().net().n_params(), cfg_.learn_rate, 0.9, cfg_.adam_beta2);
    }
    frozen_.assign(members_.size(), false);
    in_norm_ = Normalizer::identity(sdim_ + adim_);
    out_norm_ = Normalizer::identity(sdim_ + 1);
  }

  Index state_dim() const { return sdim_; }
  Index action_dim() const { return adim_; }
  Index n_members() const { return static_cast<Index>(members_.size()); }
  const EnsembleConfig& config() const { return cfg_; }
  const std::vector<Index>& elites() const { return elites_; }
  bool trained() const { return !elites_.empty(); }
  const Normalizer& input_normalizer() const { return in_norm_; }
  const Normalizer& target_normalizer() const { return out_norm_; }
  ProbabilisticNet& member(Index m) { return members_.at(static_cast<std::size_t>(m)); }
  const ProbabilisticNet& member(Index m) const { return members_.at(static_cast<std::size_t>(m)); }
  std::uint64_t member_seed(Index m) const { return seeds_.at(static_cast<std::size_t>(m)); }

  /// A frozen member keeps its parameters through training.
  void set_frozen(Index m, bool frozen) { frozen_.at(static_cast<std::size_t>(m)) = frozen; }
  void set_elites(std::vector<Index> elites) {
    require(!elites.empty(), "set_elites: empty");
    std::vector<Index> sorted = elites;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "set_elites: duplicate index");
    for (Index e : elites) require(e >= 0 && e < n_members(), "set_elites: index out of range");
    elites_ = std::move(elites);
  }
  void set_normalizers(Normalizer in, Normalizer out) {
    require(in.dim() == sdim_ + adim_ && out.dim() == sdim_ + 1, "set_normalizers: dimension mismatch");
    in_norm_ = std::move(in);
    out_norm_ = std::move(out);
  }

  Matrix model_input(const Matrix& states, const Matrix& actions) const {
    check_batch(states, actions);
    Matrix x(sdim_ + adim_, states.cols());
    x.topRows(sdim_) = states;
    x.bottomRows(adim_) = actions;
    return in_norm_.normalize(x);
  }

  Matrix model_target(const TransitionData& d) const {
    Matrix y(sdim_ + 1, d.size());
    y.topRows(sdim_) = d.next_states - d.states;
    y.row(sdim_) = d.rewards.transpose();
    return out_norm_.normalize(y);
  }

  /// Gaussian of one member at a single (s, a), original units.
  GaussianPrediction forward(Index m, const Vector& s, const Vector& a) const {
    const auto p = predict(s, a, {m});
    return p.member(0, 0);
  }

  /// Predictions of the listed members (all when empty) for a batch.
  EnsemblePrediction predict(const Matrix& states, const Matrix& actions, std::vector<Index> which = {}) const {
    if (which.empty()) {
      which.resize(members_.size());
      std::iota(which.begin(), which.end(), Index{0});
    }
    const Matrix x = model_input(states, actions);
    const Vector sd2 = out_norm_.std.array().square();
    EnsemblePrediction out;
    for (Index m : which) {
      const HeadOutput h = member(m).heads(x);
      const Matrix mean = out_norm_.denormalize(h.mean);
      const Matrix var = (h.var.array().max(cfg_.min_variance).colwise() * sd2.array()).matrix();
      out.mean.push_back(mean.topRows(sdim_));
      out.var.push_back(var.topRows(sdim_));
      out.reward_mean.push_back(mean.row(sdim_).transpose());
      out.reward_var.push_back(var.row(sdim_).transpose());
    }
    return out;
  }

  /// Members whose predictions define disagreement.
  std::vector<Index> disagreement_members() const {
    if (!cfg_.disagreement_all_members && trained()) return elites_;
    std::vector<Index> all(members_.size());
    std::iota(all.begin(), all.end(), Index{0});
    return all;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = 1;
    j["state_dim"] = sdim_;
    j["action_dim"] = adim_;
    j["hidden"] = cfg_.hidden;
    j["activation"] = activation_name(cfg_.activation);
    j["min_variance"] = cfg_.min_variance;
    j["elites"] = elites_;
    j["seeds"] = seeds_;
    j["in_mean"] = to_std(in_norm_.mean);
    j["in_std"] = to_std(in_norm_.std);
    j["out_mean"] = to_std(out_norm_.mean);
    j["out_std"] = to_std(out_norm_.std);
    j["members"] = nlohmann::json::array();
    for (const auto& m : members_) j["members"].push_back(to_std(m.net().params()));
    return j;
  }

  static EnsembleModel from_json(const nlohmann::json& j, EnsembleConfig cfg = {}) {
    if (j.at("version").get<int>() != 1) throw DataError("ensemble checkpoint: unsupported version");
    cfg.hidden = j.at("hidden").get<std::vector<Index>>();
    cfg.activation = parse_activation(j.at("activation").get<std::string>());
    cfg.min_variance = j.value("min_variance", 0.0);
    cfg.members = static_cast<int>(j.at("members").size());
    const auto elites = j.at("elites").get<std::vector<Index>>();
    cfg.elites = std::max<int>(1, static_cast<int>(elites.size()));
    cfg.elites = std::min(cfg.elites, cfg.members);
    EnsembleModel e(j.at("state_dim").get<Index>(), j.at("action_dim").get<Index>(), cfg, 0);
    e.seeds_ = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (std::size_t m = 0; m < e.members_.size(); ++m)
      e.members_[m].net().set_params(to_vector(j.at("members")[m].get<std::vector<double>>()));
    e.in_norm_ = {to_vector(j.at("in_mean").get<std::vector<double>>()),
                  to_vector(j.at("in_std").get<std::vector<double>>())};
    e.out_norm_ = {to_vector(j.at("out_mean").get<std::vector<double>>()),
                   to_vector(j.at("out_std").get<std::vector<double>>())};
    if (!elites.empty()) e.set_elites(elites);
    return e;
  }

 private:
  friend TrainingMetrics train_ensemble(EnsembleModel&, const TransitionData&, Rng&);

  void check_batch(const Matrix& states, const Matrix& actions) const {
    if (states.rows() != sdim_ || actions.rows() != adim_ || states.cols() != actions.cols())
      throw InvalidArgument("EnsembleModel: expected state dim " + std::to_string(sdim_) + " and action dim " +
                            std::to_string(adim_));
  }

  Index sdim_ = 0, adim_ = 0;
  EnsembleConfig cfg_;
  std::vector<ProbabilisticNet> members_;
  std::vector<Adam> optimizers_;
  std::vector<std::uint64_t> seeds_;
  std::vector<bool> frozen_;
  std::vector<Index> elites_;
  Normalizer in_norm_, out_norm_;
};

namespace detail {

inline Matrix gather_columns(const Matrix& m, const std::vector<std::size_t>& idx, std::size_t begin,
                             std::size_t end) {
  Matrix out(m.rows(), static_cast<Index>(end - begin));
  for (std::size_t i = begin; i < end; ++i) out.col(static_cast<Index>(i - begin)) = m.col(static_cast<Index>(idx[i]));
  return out;
}

/// Runs f(i) for i in [0, n) on up to `threads` workers.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) f(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Fits every member on independently shuffled minibatches, early-stops each
/// on the shared holdout split and picks elites by final holdout loss.
inline TrainingMetrics train_ensemble(EnsembleModel& model, const TransitionData& data, Rng& rng) {
  const auto& cfg = model.cfg_;
  const Index n = data.size();
  const int min_needed = cfg.min_transitions > 0 ? cfg.min_transitions : 2 * cfg.batch_size;
  if (n < min_needed)
    throw DataError("train_ensemble: need at least " + std::to_string(min_needed) + " transitions, have " +
                    std::to_string(n));
  require(data.actions.cols() == n && data.next_states.cols() == n && data.rewards.size() == n,
          "train_ensemble: inconsistent data");

  const auto order = rng.permutation(static_cast<std::size_t>(n));
  const auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(n)));
  const std::size_t n_train = static_cast<std::size_t>(n) - n_hold;
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  std::vector<std::size_t> hold_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));

  Matrix raw_in(model.sdim_ + model.adim_, n);
  raw_in.topRows(model.sdim_) = data.states;
  raw_in.bottomRows(model.adim_) = data.actions;
  Matrix raw_out(model.sdim_ + 1, n);
  raw_out.topRows(model.sdim_) = data.next_states - data.states;
  raw_out.row(model.sdim_) = data.rewards.transpose();
  const Matrix train_in_raw = detail::gather_columns(raw_in, train_idx, 0, n_train);
  const Matrix train_out_raw = detail::gather_columns(raw_out, train_idx, 0, n_train);
  model.in_norm_ = Normalizer::fit(train_in_raw);
  model.out_norm_ = Normalizer::fit(train_out_raw);
  const Matrix x_train = model.in_norm_.normalize(train_in_raw);
  const Matrix y_train = model.out_norm_.normalize(train_out_raw);
  Matrix x_hold, y_hold;
  if (n_hold > 0) {
    x_hold = model.in_norm_.normalize(detail::gather_columns(raw_in, hold_idx, 0, n_hold));
    y_hold = model.out_norm_.normalize(detail::gather_columns(raw_out, hold_idx, 0, n_hold));
  }

  const int M = static_cast<int>(model.members_.size());
  TrainingMetrics metrics;
  metrics.holdout_initial.assign(static_cast<std::size_t>(M), 0.0);
  metrics.holdout_final.assign(static_cast<std::size_t>(M), 0.0);
  metrics.epochs_run.assign(static_cast<std::size_t>(M), 0);
  metrics.holdout_history.assign(static_cast<std::size_t>(M), {});
  std::vector<double> last_train(static_cast<std::size_t>(M), 0.0);

  std::vector<Rng> member_rngs;
  for (int m = 0; m < M; ++m) member_rngs.push_back(rng.split());
  if (!cfg.warm_start)
    for (int m = 0; m < M; ++m) {
      if (model.frozen_[static_cast<std::size_t>(m)]) continue;
      Rng init = member_rngs[static_cast<std::size_t>(m)].split();
      model.members_[static_cast<std::size_t>(m)].init(init);
      model.optimizers_[static_cast<std::size_t>(m)] =
          Adam(model.members_[static_cast<std::size_t>(m)].net().n_params(), cfg.learn_rate, 0.9, cfg.adam_beta2);
    }

  const std::size_t batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
  detail::parallel_for(M, cfg.threads, [&](int m) {
    const auto um = static_cast<std::size_t>(m);
    auto& net = model.members_[um];
    auto& opt = model.optimizers_[um];
    auto& mrng = member_rngs[um];
    auto eval = [&]() { return n_hold > 0 ? model_loss(net, x_hold, y_hold) : model_loss(net, x_train, y_train); };
    double best = eval();
    metrics.holdout_initial[um] = best;
    Vector best_params = net.net().params();
    if (model.frozen_[um]) {
      metrics.holdout_final[um] = best;
      return;
    }
    int since_best = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
      const auto perm = mrng.permutation(n_train);
      std::size_t n_batches = (n_train + batch - 1) / batch;
      if (cfg.max_batches_per_epoch > 0) n_batches = std::min(n_batches, static_cast<std::size_t>(cfg.max_batches_per_epoch));
      double running = 0.0;
      for (std::size_t b = 0; b < n_batches; ++b) {
        const std::size_t lo = b * batch, hi = std::min(n_train, lo + batch);
        const Matrix xb = detail::gather_columns(x_train, perm, lo, hi);
        const Matrix yb = detail::gather_columns(y_train, perm, lo, hi);
        Vector grad;
        running += model_loss(net, xb, yb, &grad);
        if (!grad.allFinite()) throw NumericalError("train_ensemble: non-finite gradient");
        opt.step(net.net().params(), grad);
      }
      last_train[um] = running / static_cast<double>(std::max<std::size_t>(n_batches, 1));
      const double h = eval();
      metrics.holdout_history[um].push_back(h);
      metrics.epochs_run[um] = epoch + 1;
      if (h < best) {
        best = h;
        best_params = net.net().params();
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
    net.net().set_params(best_params);
    metrics.holdout_final[um] = best;
  });

  std::vector<Index> ranking(static_cast<std::size_t>(M));
  std::iota(ranking.begin(), ranking.end(), Index{0});
  std::stable_sort(ranking.begin(), ranking.end(), [&](Index a, Index b) {
    return metrics.holdout_final[static_cast<std::size_t>(a)] < metrics.holdout_final[static_cast<std::size_t>(b)];
  });
  ranking.resize(static_cast<std::size_t>(cfg.elites));
  model.elites_ = ranking;
  for (double l : last_train) metrics.train_loss += l / M;
  return metrics;
}

struct NextStatePrediction {
  Vector next_state;
  double reward = 0.0;
  Index member = 0;
};

/// s' = s + mean of a uniformly drawn elite; no sampling from the Gaussian.
inline NextStatePrediction predict_next(const EnsembleModel& model, const Vector& s, const Vector& a, Rng& rng) {
  if (!model.trained()) throw DataError("predict_next: ensemble has no elites (untrained)");
  const auto& el = model.elites();
  const Index m = el[rng.index(el.size())];
  const auto g = model.forward(m, s, a);
  return {s + g.mean, g.reward_mean, m};
}

inline void save_ensemble(const EnsembleModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << model.to_json().dump();
}

inline EnsembleModel load_ensemble(const std::string& path, EnsembleConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  return EnsembleModel::from_json(nlohmann::json::parse(in), std::move(cfg));
}

}  // namespace cmbpo

#pragma once

// Stochastic policies over batched states (one state per column). Discrete
// actions are represented as one-hot columns.

#include "cmbpo/common.hpp"
#include "cmbpo/mlp.hpp"
#include "cmbpo/rng.hpp"

#include <json.hpp>

#include <concepts>
#include <functional>
#include <numbers>

namespace cmbpo {

template <class P>
concept StochasticPolicy = requires(P p, const P& cp, const Matrix& S, const Matrix& A, const Vector& v, Rng& rng) {
  { cp.n_params() } -> std::convertible_to<Index>;
  { cp.params() } -> std::convertible_to<Vector>;
  p.set_params(v);
  { cp.sample(S, rng) } -> std::convertible_to<Matrix>;
  { cp.mode(S) } -> std::convertible_to<Matrix>;
  { cp.log_prob(S, A) } -> std::convertible_to<Vector>;
  { cp.grad_log_prob(S, A, v) } -> std::convertible_to<Vector>;
  { cp.kl(cp, S) } -> std::convertible_to<Vector>;
  { cp.fisher_vector_product(S, v) } -> std::convertible_to<Vector>;
};

inline Index one_hot_index(const Eigen::Ref<const Vector>& a) {
  Index k = 0;
  a.maxCoeff(&k);
  return k;
}

inline Vector one_hot(Index k, Index n) {
  Vector v = Vector::Zero(n);
  v[k] = 1.0;
  return v;
}

/// Tabular softmax over logits theta(s, a).
class SoftmaxTablePolicy {
 public:
  using StateIndexer = std::function<Index(const Eigen::Ref<const Vector>&)>;

  SoftmaxTablePolicy() = default;
  /// The default indexer reads the state index from the first coordinate.
  SoftmaxTablePolicy(Index n_states, Index n_actions, StateIndexer indexer = {})
      : ns_(n_states), na_(n_actions), logits_(Vector::Zero(n_states * n_actions)), indexer_(std::move(indexer)) {
    require(n_states >= 1 && n_actions >= 1, "SoftmaxTablePolicy: sizes must be positive");
    if (!indexer_) indexer_ = [](const Eigen::Ref<const Vector>& s) { return static_cast<Index>(std::lround(s[0])); };
  }

  Index n_states() const { return ns_; }
  Index n_actions() const { return na_; }
  Index n_params() const { return logits_.size(); }
  const Vector& params() const { return logits_; }
  void set_params(const Vector& p) {
    require(p.size() == logits_.size(), "SoftmaxTablePolicy: parameter size mismatch");
    logits_ = p;
  }

  Index state_index(const Eigen::Ref<const Vector>& s) const {
    const Index k = indexer_(s);
    if (k < 0 || k >= ns_) throw InvalidArgument("SoftmaxTablePolicy: state index out of range");
    return k;
  }

  /// pi(. | state index k), numerically stable.
  Vector probs(Index k) const {
    Vector z(na_);
    for (Index a = 0; a < na_; ++a) z[a] = logits_[k * na_ + a];
    z.array() -= z.maxCoeff();
    z = z.array().exp();
    return z / z.sum();
  }

  /// Full table as (n_states x n_actions).
  Matrix table() const {
    Matrix t(ns_, na_);
    for (Index k = 0; k < ns_; ++k) t.row(k) = probs(k).transpose();
    return t;
  }

  Matrix sample(const Matrix& S, Rng& rng) const {
    Matrix out = Matrix::Zero(na_, S.cols());
    for (Index j = 0; j < S.cols(); ++j) out(static_cast<Index>(rng.categorical(probs(state_index(S.col(j))))), j) = 1.0;
    return out;
  }

  Matrix mode(const Matrix& S) const {
    Matrix out = Matrix::Zero(na_, S.cols());
    for (Index j = 0; j < S.cols(); ++j) {
      Index a = 0;
      probs(state_index(S.col(j))).maxCoeff(&a);
      out(a, j) = 1.0;
    }
    return out;
  }

  Vector log_prob(const Matrix& S, const Matrix& A) const {
    Vector out(S.cols());
    for (Index j = 0; j < S.cols(); ++j) out[j] = std::log(probs(state_index(S.col(j)))[one_hot_index(A.col(j))]);
    return out;
  }

  /// sum_j w_j grad log pi(a_j | s_j).
  Vector grad_log_prob(const Matrix& S, const Matrix& A, const Vector& w) const {
    Vector g = Vector::Zero(logits_.size());
    for (Index j = 0; j < S.cols(); ++j) {
      const Index k = state_index(S.col(j));
      const Vector p = probs(k);
      g.segment(k * na_, na_) -= w[j] * p;
      g[k * na_ + one_hot_index(A.col(j))] += w[j];
    }
    return g;
  }

  /// Per-state KL(this || other).
  Vector kl(const SoftmaxTablePolicy& other, const Matrix& S) const {
    Vector out(S.cols());
    for (Index j = 0; j < S.cols(); ++j) {
      const Index k = state_index(S.col(j));
      const Vector p = probs(k), q = other.probs(k);
      double d = 0.0;
      for (Index a = 0; a < na_; ++a)
        if (p[a] > 0.0) d += p[a] * (std::log(p[a]) - std::log(q[a]));
      out[j] = std::max(d, 0.0);
    }
    return out;
  }

  /// Hessian of mean_j KL(pi_current || pi_theta)(s_j) at theta = current, times v.
  Vector fisher_vector_product(const Matrix& S, const Vector& v) const {
    require(v.size() == logits_.size(), "fisher_vector_product: size mismatch");
    Vector out = Vector::Zero(v.size());
    const double inv_n = 1.0 / static_cast<double>(std::max<Index>(S.cols(), 1));
    for (Index j = 0; j < S.cols(); ++j) {
      const Index k = state_index(S.col(j));
      const Vector p = probs(k);
      const Vector vk = v.segment(k * na_, na_);
      out.segment(k * na_, na_) += inv_n * (p.cwiseProduct(vk) - p * p.dot(vk));
    }
    return out;
  }

  nlohmann::json to_json() const {
    return {{"kind", "softmax_table"}, {"n_states", ns_}, {"n_actions", na_}, {"params", to_std(logits_)}};
  }

 private:
  Index ns_ = 0, na_ = 0;
  Vector logits_;
  StateIndexer indexer_;
};

/// Diagonal Gaussian with an Mlp mean and a state-independent log-std.
class GaussianMlpPolicy {
 public:
  static constexpr double kLogStdMin = -20.0;
  static constexpr double kLogStdMax = 2.0;

  GaussianMlpPolicy() = default;
  GaussianMlpPolicy(Index state_dim, Index action_dim, const std::vector<Index>& hidden, double init_log_std,
                    Rng& rng, Activation act = Activation::Tanh)
      : net_(state_dim, hidden, action_dim, act), log_std_(Vector::Constant(action_dim, init_log_std)) {
    net_.init(rng, 0.01);
  }

  Index state_dim() const { return net_.in_dim(); }
  Index action_dim() const { return net_.out_dim(); }
  Index n_params() const { return net_.n_params() + log_std_.size(); }
  Vector params() const {
    Vector p(n_params());
    p << net_.params(), log_std_;
    return p;
  }
  void set_params(const Vector& p) {
    require(p.size() == n_params(), "GaussianMlpPolicy: parameter size mismatch");
    net_.set_params(p.head(net_.n_params()));
    log_std_ = p.tail(log_std_.size());
  }

  const Mlp& mean_net() const { return net_; }
  Vector log_std() const { return log_std_.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax); }
  Vector stddev() const { return log_std().array().exp(); }

  Matrix mean(const Matrix& S) const { return net_.forward(S); }
  Matrix mode(const Matrix& S) const { return mean(S); }

  Matrix sample(const Matrix& S, Rng& rng) const {
    Matrix a = mean(S);
    const Vector sd = stddev();
    for (Index j = 0; j < a.cols(); ++j)
      for (Index k = 0; k < a.rows(); ++k) a(k, j) += sd[k] * rng.normal();
    return a;
  }

  Vector log_prob(const Matrix& S, const Matrix& A) const {
    const Matrix mu = mean(S);
    const Vector ls = log_std();
    const Vector inv_sd = (-ls).array().exp();
    const double c = ls.sum() + 0.5 * static_cast<double>(ls.size()) * std::log(2.0 * std::numbers::pi);
    Vector out(S.cols());
    for (Index j = 0; j < S.cols(); ++j)
      out[j] = -0.5 * ((A.col(j) - mu.col(j)).cwiseProduct(inv_sd)).squaredNorm() - c;
    return out;
  }

  Vector grad_log_prob(const Matrix& S, const Matrix& A, const Vector& w) const {
    MlpCache cache;
    const Matrix mu = net_.forward(S, cache);
    const Vector ls = log_std();
    const Vector inv_var = (-2.0 * ls).array().exp();
    const Matrix diff = A - mu;
    Matrix d_out = diff.array().colwise() * inv_var.array();
    d_out.array().rowwise() *= w.transpose().array();
    Vector g(n_params());
    g.head(net_.n_params()) = net_.backward(cache, d_out);
    Vector gls = Vector::Zero(ls.size());
    for (Index j = 0; j < S.cols(); ++j)
      gls += w[j] * ((diff.col(j).array().square() * inv_var.array()) - 1.0).matrix();
    for (Index k = 0; k < ls.size(); ++k)
      if (log_std_[k] < kLogStdMin || log_std_[k] > kLogStdMax) gls[k] = 0.0;
    g.tail(ls.size()) = gls;
    return g;
  }

  Vector kl(const GaussianMlpPolicy& other, const Matrix& S) const {
    const Matrix mp = mean(S), mq = other.mean(S);
    const Vector lp = log_std(), lq = other.log_std();
    const Vector vp = (2.0 * lp).array().exp(), vq = (2.0 * lq).array().exp();
    Vector out(S.cols());
    for (Index j = 0; j < S.cols(); ++j) {
      double d = 0.0;
      for (Index k = 0; k < lp.size(); ++k) {
        const double dm = mp(k, j) - mq(k, j);
        d += lq[k] - lp[k] + (vp[k] + dm * dm) / (2.0 * vq[k]) - 0.5;
      }
      out[j] = std::max(d, 0.0);
    }
    return out;
  }

  /// Mean part J^T diag(1/sigma^2) J averaged over states; 2 I on the log-std block.
  Vector fisher_vector_product(const Matrix& S, const Vector& v) const {
    require(v.size() == n_params(), "fisher_vector_product: size mismatch");
    MlpCache cache;
    net_.forward(S, cache);
    const Vector vn = v.head(net_.n_params());
    const Vector inv_var = (-2.0 * log_std()).array().exp();
    const double inv_n = 1.0 / static_cast<double>(std::max<Index>(S.cols(), 1));
    Matrix jv = net_.jvp(cache, vn);
    jv = (jv.array().colwise() * inv_var.array()).matrix() * inv_n;
    Vector out(n_params());
    out.head(net_.n_params()) = net_.backward(cache, jv);
    Vector tail = 2.0 * v.tail(log_std_.size());
    for (Index k = 0; k < log_std_.size(); ++k)
      if (log_std_[k] < kLogStdMin || log_std_[k] > kLogStdMax) tail[k] = 0.0;
    out.tail(log_std_.size()) = tail;
    return out;
  }

  nlohmann::json to_json() const {
    return {{"kind", "gaussian_mlp"},
            {"state_dim", state_dim()},
            {"action_dim", action_dim()},
            {"hidden", net_.hidden()},
            {"params", to_std(params())}};
  }

 private:
  Mlp net_;
  Vector log_std_;
};

static_assert(StochasticPolicy<SoftmaxTablePolicy>);
static_assert(StochasticPolicy<GaussianMlpPolicy>);

/// Mean over states of KL(a || b).
template <StochasticPolicy P>
double mean_kl(const P& a, const P& b, const Matrix& S) {
  return S.cols() == 0 ? 0.0 : a.kl(b, S).mean();
}

}  // namespace cmbpo

#pragma once

#include "cmbpo/mlp.hpp"

#include <functional>

namespace cmbpo {

/// Maps a batch of states to network features (identity when empty).
using FeatureMap = std::function<Matrix(const Matrix&)>;

struct ValueFitConfig {
  int repeats = 80;
  int minibatch = 256;
  double learn_rate = 3e-4;
  /// Standardise targets before each fit, rescaling the output layer so
  /// current predictions are unchanged. Returns that grow to hundreds
  /// otherwise take thousands of steps just to reach the right scale.
  bool normalize_targets = false;
};

inline constexpr double kValueScaleFloor = 1.0;

/// Scalar state-value regressor V(s) on optional features.
class ValueFunction {
 public:
  ValueFunction() = default;
  ValueFunction(Index feature_dim, const std::vector<Index>& hidden, Rng& rng, double learn_rate,
                FeatureMap features = {}, Activation act = Activation::Tanh)
      : net_(feature_dim, hidden, 1, act), features_(std::move(features)) {
    net_.init(rng);
    opt_ = Adam(net_.n_params(), learn_rate);
  }

  Mlp& net() { return net_; }
  const Mlp& net() const { return net_; }
  Adam& optimizer() { return opt_; }

  Matrix features(const Matrix& S) const { return features_ ? features_(S) : S; }
  Vector predict(const Matrix& S) const {
    return ((net_.forward(features(S)).row(0).array() * scale_) + shift_).transpose();
  }
  double predict(const Vector& s) const { return predict(Matrix(s))[0]; }

  double shift() const { return shift_; }
  double scale() const { return scale_; }

  /// Switches the output to shift + scale * net. With preserve, the last
  /// layer is adjusted so that every prediction stays the same.
  void set_output_scale(double shift, double scale, bool preserve = true) {
    require(scale > 0.0, "ValueFunction: output scale must be positive");
    if (preserve) {
      const Index last = net_.n_layers() - 1;
      net_.weight(last) *= scale_ / scale;
      net_.bias(last) = (net_.bias(last) * scale_).array() + (shift_ - shift);
      net_.bias(last) /= scale;
    }
    shift_ = shift;
    scale_ = scale;
  }

 private:
  Mlp net_;
  Adam opt_;
  FeatureMap features_;
  double shift_ = 0.0, scale_ = 1.0;
  bool fitted_ = false;

  friend std::vector<double> value_fit(ValueFunction&, const Matrix&, const Vector&, const ValueFitConfig&, Rng&);
};

/// Minibatch squared-error regression; returns the mean loss of each repeat,
/// in the network's (possibly standardised) output units.
inline std::vector<double> value_fit(ValueFunction& vf, const Matrix& S, const Vector& raw_targets,
                                     const ValueFitConfig& cfg, Rng& rng) {
  if (S.cols() == 0) throw InvalidArgument("value_fit: empty batch");
  require(raw_targets.size() == S.cols(), "value_fit: target count mismatch");
  vf.optimizer().set_lr(cfg.learn_rate);
  if (cfg.normalize_targets) {
    const double mu = raw_targets.mean();
    const double sd = std::sqrt((raw_targets.array() - mu).square().mean());
    // An untrained net's outputs carry nothing worth preserving.
    vf.set_output_scale(mu, std::max(sd, kValueScaleFloor), vf.fitted_);
  }
  vf.fitted_ = true;
  const Vector targets = ((raw_targets.array() - vf.shift()) / vf.scale()).matrix();
  const Matrix X = vf.features(S);
  const auto n = static_cast<std::size_t>(S.cols());
  const std::size_t mb = static_cast<std::size_t>(std::max(1, cfg.minibatch));
  std::vector<double> history;
  for (int r = 0; r < cfg.repeats; ++r) {
    const auto perm = rng.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < n; lo += mb, ++batches) {
      const std::size_t hi = std::min(n, lo + mb);
      Matrix xb(X.rows(), static_cast<Index>(hi - lo));
      Vector yb(static_cast<Index>(hi - lo));
      for (std::size_t i = lo; i < hi; ++i) {
        xb.col(static_cast<Index>(i - lo)) = X.col(static_cast<Index>(perm[i]));
        yb[static_cast<Index>(i - lo)] = targets[static_cast<Index>(perm[i])];
      }
      MlpCache cache;
      const Vector pred = vf.net().forward(xb, cache).row(0).transpose();
      const Vector err = pred - yb;
      const double m = static_cast<double>(err.size());
      const double loss = err.squaredNorm() / m;
      total += loss;
      // Adam rescales any nonzero gradient to a full step, so round-off
      // residuals of an exact fit would otherwise push the weights around.
      if (loss <= 1e-24) continue;
      const Matrix d_out = (2.0 / m) * err.transpose();
      const Vector grad = vf.net().backward(cache, d_out);
      if (!grad.allFinite()) throw NumericalError("value_fit: non-finite gradient");
      vf.optimizer().step(vf.net().params(), grad);
    }
    history.push_back(total / static_cast<double>(batches));
  }
  return history;
}

}  // namespace cmbpo

#pragma once

// Fully connected network over a single flat parameter vector. Inputs and
// outputs are column-major batches (one sample per column). The flat layout
// is [W_0, b_0, W_1, b_1, ...] with each W stored column-major.

#include "cmbpo/common.hpp"
#include "cmbpo/rng.hpp"

#include <string>
#include <vector>

namespace cmbpo {

enum class Activation { Tanh, Swish, Relu };

inline Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "swish") return Activation::Swish;
  if (name == "relu") return Activation::Relu;
  throw InvalidArgument("unknown activation: " + name);
}

inline std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Swish: return "swish";
    case Activation::Relu: return "relu";
  }
  return "?";
}

/// Pre- and post-activation values of one forward pass.
struct MlpCache {
  std::vector<Matrix> pre;   ///< z_l for every layer
  std::vector<Matrix> post;  ///< a_0 = input, a_{l+1} = f(z_l) for hidden layers
};

class Mlp {
 public:
  Mlp() = default;
  Mlp(Index in, const std::vector<Index>& hidden, Index out, Activation act = Activation::Tanh)
      : act_(act) {
    require(in >= 1 && out >= 1, "Mlp: input and output sizes must be positive");
    sizes_.push_back(in);
    for (Index h : hidden) {
      require(h >= 1, "Mlp: hidden sizes must be positive");
      sizes_.push_back(h);
    }
    sizes_.push_back(out);
    Index off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      w_off_.push_back(off);
      off += sizes_[l + 1] * sizes_[l];
      b_off_.push_back(off);
      off += sizes_[l + 1];
    }
    params_ = Vector::Zero(off);
  }

  Index in_dim() const { return sizes_.front(); }
  Index out_dim() const { return sizes_.back(); }
  Index n_layers() const { return static_cast<Index>(w_off_.size()); }
  Index n_params() const { return params_.size(); }
  Activation activation() const { return act_; }
  const std::vector<Index>& sizes() const { return sizes_; }
  std::vector<Index> hidden() const { return {sizes_.begin() + 1, sizes_.end() - 1}; }

  const Vector& params() const { return params_; }
  Vector& params() { return params_; }
  void set_params(const Vector& p) {
    require(p.size() == params_.size(), "Mlp: parameter size mismatch");
    params_ = p;
  }

  /// LeCun-normal weights, zero biases; the last layer is scaled by out_scale.
  void init(Rng& rng, double out_scale = 1.0) {
    for (Index l = 0; l < n_layers(); ++l) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(sizes_[l])) * (l + 1 == n_layers() ? out_scale : 1.0);
      auto w = weight(l);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal(0.0, sd);
      bias(l).setZero();
    }
  }

  Matrix forward(const Matrix& x) const {
    check_input(x);
    Matrix a = x;
    for (Index l = 0; l < n_layers(); ++l) {
      Matrix z = (weight(l) * a).colwise() + bias(l);
      if (l + 1 < n_layers()) {
        a = activate(z);
      } else {
        return z;
      }
    }
    return a;
  }

  Matrix forward(const Matrix& x, MlpCache& cache) const {
    check_input(x);
    cache.pre.assign(static_cast<std::size_t>(n_layers()), Matrix());
    cache.post.assign(static_cast<std::size_t>(n_layers()), Matrix());
    cache.post[0] = x;
    for (Index l = 0; l < n_layers(); ++l) {
      const auto ul = static_cast<std::size_t>(l);
      cache.pre[ul] = (weight(l) * cache.post[ul]).colwise() + bias(l);
      if (l + 1 < n_layers()) cache.post[ul + 1] = activate(cache.pre[ul]);
    }
    return cache.pre.back();
  }

  /// Gradient w.r.t. the flat parameters of sum_j <d_out_j, y_j>. If d_input is
  /// given it receives the gradient w.r.t. the inputs.
  Vector backward(const MlpCache& cache, const Matrix& d_out, Matrix* d_input = nullptr) const {
    require(d_out.rows() == out_dim() && d_out.cols() == cache.post[0].cols(), "Mlp: backward shape mismatch");
    Vector grad(params_.size());
    Matrix dz = d_out;
    for (Index l = n_layers() - 1; l >= 0; --l) {
      const auto ul = static_cast<std::size_t>(l);
      Eigen::Map<Matrix>(grad.data() + w_off_[ul], sizes_[ul + 1], sizes_[ul]).noalias() =
          dz * cache.post[ul].transpose();
      grad.segment(b_off_[ul], sizes_[ul + 1]) = dz.rowwise().sum();
      if (l == 0 && d_input == nullptr) break;
      Matrix da = weight(l).transpose() * dz;
      if (l == 0) {
        *d_input = std::move(da);
      } else {
        dz = da.cwiseProduct(activate_grad(cache.pre[ul - 1], cache.post[ul]));
      }
    }
    return grad;
  }

  /// Directional derivative of the outputs along parameter tangent v.
  Matrix jvp(const MlpCache& cache, const Vector& v) const {
    require(v.size() == params_.size(), "Mlp: tangent size mismatch");
    const Index n = cache.post[0].cols();
    Matrix da = Matrix::Zero(sizes_[0], n);
    for (Index l = 0; l < n_layers(); ++l) {
      const auto ul = static_cast<std::size_t>(l);
      Eigen::Map<const Matrix> dw(v.data() + w_off_[ul], sizes_[ul + 1], sizes_[ul]);
      Matrix dz = dw * cache.post[ul] + weight(l) * da;
      dz.colwise() += v.segment(b_off_[ul], sizes_[ul + 1]);
      if (l + 1 == n_layers()) return dz;
      da = dz.cwiseProduct(activate_grad(cache.pre[ul], cache.post[ul + 1]));
    }
    return da;
  }

  Eigen::Map<Matrix> weight(Index l) {
    const auto ul = static_cast<std::size_t>(l);
    return {params_.data() + w_off_[ul], sizes_[ul + 1], sizes_[ul]};
  }
  Eigen::Map<const Matrix> weight(Index l) const {
    const auto ul = static_cast<std::size_t>(l);
    return {params_.data() + w_off_[ul], sizes_[ul + 1], sizes_[ul]};
  }
  Eigen::Map<Vector> bias(Index l) {
    const auto ul = static_cast<std::size_t>(l);
    return {params_.data() + b_off_[ul], sizes_[ul + 1]};
  }
  Eigen::Map<const Vector> bias(Index l) const {
    const auto ul = static_cast<std::size_t>(l);
    return {params_.data() + b_off_[ul], sizes_[ul + 1]};
  }

 private:
  void check_input(const Matrix& x) const {
    require(!sizes_.empty(), "Mlp: network not constructed");
    if (x.rows() != in_dim())
      throw InvalidArgument("Mlp: expected input dimension " + std::to_string(in_dim()) + ", got " +
                            std::to_string(x.rows()));
  }

  Matrix activate(const Matrix& z) const {
    switch (act_) {
      case Activation::Tanh: return z.array().tanh().matrix();
      case Activation::Swish: return (z.array() / (1.0 + (-z.array()).exp())).matrix();
      case Activation::Relu: return z.cwiseMax(0.0);
    }
    return z;
  }

  // f'(z), using the cached output a = f(z) where convenient.
  Matrix activate_grad(const Matrix& z, const Matrix& a) const {
    switch (act_) {
      case Activation::Tanh: return (1.0 - a.array().square()).matrix();
      case Activation::Swish: {
        const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
        return (sig + a.array() * (1.0 - sig)).matrix();
      }
      case Activation::Relu: return (z.array() > 0.0).cast<double>().matrix();
    }
    return Matrix::Ones(z.rows(), z.cols());
  }

  std::vector<Index> sizes_;
  std::vector<Index> w_off_, b_off_;
  Activation act_ = Activation::Tanh;
  Vector params_;
};

/// Adaptive-moment gradient descent over a flat parameter vector.
class Adam {
 public:
  Adam() = default;
  explicit Adam(Index n, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(Vector::Zero(n)), v_(Vector::Zero(n)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  /// params -= lr * m_hat / (sqrt(v_hat) + eps)
  void step(Vector& params, const Vector& grad) {
    require(grad.size() == m_.size() && params.size() == m_.size(), "Adam: size mismatch");
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  long steps() const { return t_; }

 private:
  Vector m_, v_;
  double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

}  // namespace cmbpo

#pragma once

#include "cmbpo/common.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>

namespace cmbpo {

/// Seeded random source. Every consumer gets its own stream via split(), so
/// one master seed determines an entire run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(mix(seed)) {}

  /// Derives an independent child stream; advances this stream once.
  Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

  /// Child stream keyed by a label, without advancing this stream.
  Rng fork(std::uint64_t key) const {
    auto copy = engine_;
    return Rng(copy() ^ mix(key + 0x632be59bd9b4e019ULL));
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

  Vector normal_vector(Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  /// Symmetric Dirichlet sample.
  Vector dirichlet(Index n, double concentration = 1.0) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = std::max(gamma(concentration), 1e-300);
    return v / v.sum();
  }

  /// Draws an index with probability proportional to weights (non-negative).
  std::size_t categorical(const Vector& weights) {
    const double total = weights.sum();
    double u = uniform() * total;
    for (Index i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return static_cast<std::size_t>(i);
    }
    for (Index i = weights.size() - 1; i >= 0; --i)
      if (weights[i] > 0.0) return static_cast<std::size_t>(i);
    return 0;
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Fisher-Yates with our own draws so the sequence does not depend on the
    // standard library's shuffle implementation.
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[index(i)]);
    return idx;
  }

  std::uint64_t next_u64() { return engine_(); }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace cmbpo

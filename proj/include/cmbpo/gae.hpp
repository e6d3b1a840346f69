#pragma once

#include "cmbpo/common.hpp"

namespace cmbpo {

struct GaeResult {
  Vector advantages;
  Vector targets;  ///< advantages + values
};

/// A_t = sum_l (gamma lambda)^l delta_{t+l} with delta_t = r_t + gamma V(s_{t+1}) - V(s_t).
/// bootstrap is V(s_T), or 0 when the trajectory ended in a terminal state.
inline GaeResult gae_advantages(const Vector& rewards, const Vector& values, double bootstrap, double gamma,
                                double lambda) {
  const Index T = rewards.size();
  if (T == 0) throw InvalidArgument("gae_advantages: empty trajectory");
  require(values.size() == T, "gae_advantages: need one value per step");
  GaeResult out{Vector(T), Vector(T)};
  double next_value = bootstrap, running = 0.0;
  for (Index t = T - 1; t >= 0; --t) {
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lambda * running;
    out.advantages[t] = running;
    next_value = values[t];
  }
  out.targets = out.advantages + values;
  return out;
}

/// Zero mean, unit variance (population std); leaves a constant batch at zero.
inline Vector normalize_advantages(const Vector& adv) {
  if (adv.size() == 0) return adv;
  const double mu = adv.mean();
  const double sd = std::sqrt((adv.array() - mu).square().mean());
  return (adv.array() - mu) / (sd + 1e-8);
}

}  // namespace cmbpo

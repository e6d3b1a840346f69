// Fits a small ensemble to random point-mass transitions and prints how the
// KL disagreement grows as queries move away from the training data.

#include "cmbpo/environments.hpp"
#include "cmbpo/uncertainty.hpp"

#include <cstdio>

using namespace cmbpo;

int main() {
  Rng rng(3);
  PointCircleEnv env(PointCircleSpec{});
  const Index n = 4000;
  TransitionData d;
  d.states.resize(4, n);
  d.actions.resize(2, n);
  d.next_states.resize(4, n);
  d.rewards.resize(n);
  for (Index j = 0; j < n; ++j) {
    Vector s = 0.5 * rng.normal_vector(4);
    Vector a = rng.normal_vector(2).cwiseMax(-1.0).cwiseMin(1.0);
    d.states.col(j) = s;
    d.actions.col(j) = a;
    d.next_states.col(j) = env.dynamics(s, a);
    d.rewards[j] = env.reward(a, d.next_states.col(j));
  }

  EnsembleConfig cfg;
  cfg.members = 5;
  cfg.elites = 4;
  cfg.hidden = {64, 64};
  cfg.batch_size = 256;
  cfg.max_epochs = 40;
  cfg.min_variance = 1e-3;
  EnsembleModel model(4, 2, cfg, 11);
  const auto tm = train_ensemble(model, d, rng);
  std::printf("member 0 trained %d epochs\n\n%8s %14s\n", tm.epochs_run.front(), "radius", "disagreement");

  for (double radius : {0.25, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    Matrix S(4, 200), A(2, 200);
    for (Index j = 0; j < 200; ++j) {
      Vector dir = rng.normal_vector(4);
      S.col(j) = radius * dir / dir.norm();
      A.col(j) = rng.normal_vector(2).cwiseMax(-1.0).cwiseMin(1.0);
    }
    std::printf("%8.2f %14.5g\n", radius, ensemble_disagreement(model, S, A).mean());
  }
}

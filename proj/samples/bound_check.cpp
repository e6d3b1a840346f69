// Draws random tabular CMDPs with a perturbed model and shows where the true
// return change falls inside the model-based improvement interval.
//
//   bound_check [instances] [seed]

#include "cmbpo/exact_analysis.hpp"

#include <cstdio>
#include <string>

using namespace cmbpo;

int main(int argc, char** argv) {
  const int n = argc > 1 ? std::stoi(argv[1]) : 5;
  Rng master(argc > 2 ? std::stoull(argv[2]) : 7);
  std::printf("%3s %3s %3s %6s %6s %10s %10s %10s %8s %8s\n", "#", "S", "A", "gamma", "mix", "lower", "dJ", "upper",
              "eps_pi", "eps_m");
  for (int i = 0; i < n; ++i) {
    Rng rng = master.split();
    const RandomInstance inst = random_instance(rng);
    const auto r = boundary_report(inst.cmdp, inst.model_kernel, inst.base, inst.candidate, Signal::reward());
    std::printf("%3d %3ld %3ld %6.3f %6.3f %10.4f %10.4f %10.4f %8.4f %8.4f%s\n", i,
                static_cast<long>(inst.cmdp.n_states()), static_cast<long>(inst.cmdp.n_actions()),
                inst.cmdp.discount(), inst.model_mix, r.lower, r.delta_j, r.upper, r.eps_pi, r.eps_m,
                r.holds ? "" : "  VIOLATED");
  }
}

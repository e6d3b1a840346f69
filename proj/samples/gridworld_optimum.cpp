// Prints the hazard gridworld and its best deterministic policy under the
// discounted cost limit, for a few limits.
//
//   gridworld_optimum [limit...]

#include "cmbpo/environments.hpp"

#include <iostream>

using namespace cmbpo;

int main(int argc, char** argv) {
  std::vector<double> limits;
  for (int i = 1; i < argc; ++i) limits.push_back(std::stod(argv[i]));
  if (limits.empty()) limits = {0.0, 0.2, 1.0};

  for (double limit : limits) {
    GridworldSpec spec;
    spec.cost_limit = limit;
    const GridLayout g(spec);
    const TabularCMDP cmdp = hazard_gridworld(spec);
    const auto opt = exact_constrained_optimum(cmdp);
    std::cout << "cost limit " << limit << ": ";
    if (!opt.feasible()) {
      std::cout << "infeasible\n\n";
      continue;
    }
    std::cout << "return " << opt.reward << ", cost " << opt.cost << " (" << opt.evaluated << " nodes)\n";
    static const char arrows[] = {'^', 'v', '<', '>'};
    for (int r = 0; r < g.size(); ++r) {
      for (int c = 0; c < g.size(); ++c) {
        char ch = arrows[opt.actions[static_cast<std::size_t>(g.index(r, c))]];
        if (g.hazard(r, c)) ch = 'X';
        else if (g.terminal(r, c)) ch = 'G';
        std::cout << ' ' << ch;
      }
      std::cout << '\n';
    }
    std::cout << '\n';
  }
}

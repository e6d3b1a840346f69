#include "cmbpo/environments.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cmbpo;

TEST(Gridworld, SingleCellIsAbsorbingWithZeroReturn) {
  GridworldSpec spec;
  spec.size = 1;
  spec.hazards = {};
  spec.start = {0, 0};
  const auto cmdp = hazard_gridworld(spec);
  EXPECT_EQ(cmdp.n_states(), 1);
  for (Index a = 0; a < 4; ++a) EXPECT_DOUBLE_EQ(cmdp.transition()(0, a, 0), 1.0);
  EXPECT_DOUBLE_EQ(exact_returns(cmdp, PolicyTable::uniform(1, 4)).reward, 0.0);
}

TEST(Gridworld, TransitionRowsSumToOne) {
  const auto cmdp = hazard_gridworld(GridworldSpec{});
  for (Index s = 0; s < cmdp.n_states(); ++s)
    for (Index a = 0; a < cmdp.n_actions(); ++a) EXPECT_NEAR(cmdp.transition().row(s, a).sum(), 1.0, 1e-15);
}

TEST(Gridworld, NoHazardsMeansNoCost) {
  GridworldSpec spec;
  spec.size = 3;
  spec.hazards = {};
  spec.start = {1, 0};
  const auto cmdp = hazard_gridworld(spec);
  for (double c : cmdp.cost(0).data()) EXPECT_EQ(c, 0.0);
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    Matrix p(cmdp.n_states(), 4);
    for (Index s = 0; s < cmdp.n_states(); ++s) p.row(s) = rng.dirichlet(4).transpose();
    EXPECT_EQ(exact_returns(cmdp, PolicyTable(p)).cost, 0.0);
  }
  const auto opt = exact_constrained_optimum(cmdp);
  const auto brute = brute_force_constrained_optimum(cmdp);
  EXPECT_NEAR(opt.reward, brute.reward, 1e-12);
  // Heading right twice from column 0 is optimal; slip only delays it.
  EXPECT_EQ(opt.actions[static_cast<std::size_t>(GridLayout(spec).index(1, 0))], 3);
}

TEST(Gridworld, BranchAndBoundMatchesEnumerationOnSmallGrids) {
  struct Case {
    std::vector<std::pair<int, int>> hazards;
    std::pair<int, int> start;
    double limit;
  };
  const std::vector<Case> cases = {
      {{{0, 1}}, {1, 0}, 0.3}, {{{0, 1}}, {1, 0}, 0.05}, {{{1, 1}}, {0, 0}, 0.5},
      {{{2, 1}}, {0, 0}, 0.2}, {{{0, 1}, {2, 1}}, {1, 0}, 0.9}, {{}, {2, 0}, 0.0},
  };
  for (const auto& c : cases) {
    GridworldSpec spec;
    spec.size = 3;
    spec.hazards = c.hazards;
    spec.start = c.start;
    spec.cost_limit = c.limit;
    const auto cmdp = hazard_gridworld(spec);
    const auto bb = exact_constrained_optimum(cmdp);
    const auto brute = brute_force_constrained_optimum(cmdp);
    ASSERT_EQ(bb.feasible(), brute.feasible());
    if (!bb.feasible()) continue;
    EXPECT_NEAR(bb.reward, brute.reward, 1e-10) << "limit " << c.limit;
    EXPECT_LE(bb.cost, c.limit + 1e-12);
  }
}

TEST(Gridworld, ConstraintForcesADetourOnTheDefaultInstance) {
  const GridworldSpec spec;
  const auto cmdp = hazard_gridworld(spec);
  auto loose_spec = spec;
  loose_spec.cost_limit = 1e9;
  const auto greedy = exact_constrained_optimum(hazard_gridworld(loose_spec));
  const auto safe = exact_constrained_optimum(cmdp);
  ASSERT_TRUE(safe.feasible());
  EXPECT_GT(greedy.cost, spec.cost_limit);
  EXPECT_LE(safe.cost, spec.cost_limit);
  EXPECT_LT(safe.reward, greedy.reward);
  // Re-evaluate the reported policies independently.
  const auto check = exact_returns(cmdp, deterministic_table(safe.actions, 4));
  EXPECT_NEAR(check.reward, safe.reward, 1e-12);
  EXPECT_NEAR(check.cost, safe.cost, 1e-12);
  EXPECT_NEAR(safe.reward, 3.05431, 1e-5);
}

TEST(Gridworld, SampledStepsFollowTheKernel) {
  GridworldSpec spec;
  const GridworldEnv env(spec);
  Rng rng(3);
  const Vector s = env.reset(rng);
  EXPECT_EQ(s, Vector(Eigen::Vector2d(2, 0)));
  const Vector right = one_hot(3, 4);
  int moved = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const auto out = env.step(s, right, rng);
    if (out.next_state == Vector(Eigen::Vector2d(2, 1))) {
      ++moved;
      EXPECT_DOUBLE_EQ(out.reward, 1.0);
      EXPECT_DOUBLE_EQ(out.cost, env.cost(s, right, out.next_state));
    }
  }
  EXPECT_NEAR(static_cast<double>(moved) / n, 0.9, 0.01);
  EXPECT_TRUE(env.terminal(s, right, Vector(Eigen::Vector2d(0, 2))));
  EXPECT_TRUE(env.terminal(s, right, Vector(Eigen::Vector2d(3, 4))));
  EXPECT_EQ(env.project(Vector(Eigen::Vector2d(1.4, 2.6))), Vector(Eigen::Vector2d(1, 3)));
}

TEST(Gridworld, InvalidGeometryRejected) {
  GridworldSpec spec;
  spec.start = {0, 2};  // on a hazard
  EXPECT_THROW(hazard_gridworld(spec), InvalidArgument);
  spec = GridworldSpec{};
  spec.size = 0;
  EXPECT_THROW(hazard_gridworld(spec), InvalidArgument);
}

TEST(PointCircle, RestWithZeroActionIsFree) {
  PointCircleSpec spec;
  spec.init_noise = 0.0;
  const PointCircleEnv env(spec);
  Rng rng(1);
  Vector s = env.reset(rng);
  for (int t = 0; t < 50; ++t) {
    const auto out = env.step(s, Vector::Zero(2), rng);
    EXPECT_EQ(out.reward, 0.0);
    EXPECT_EQ(out.cost, 0.0);
    s = out.next_state;
  }
  EXPECT_EQ(s, Vector::Zero(4));
}

TEST(PointCircle, OutwardAccelerationHitsTheWallOnSchedule) {
  PointCircleSpec spec;
  spec.half_width = 0.45;
  spec.init_noise = 0.0;
  const PointCircleEnv env(spec);
  Rng rng(1);
  // x_n = (n dt)^2 / 2 exceeds 0.45 first at n = ceil(sqrt(0.9) / dt) = 10.
  const int expected = static_cast<int>(std::ceil(std::sqrt(2 * spec.half_width) / spec.dt));
  Vector s = Vector::Zero(4);
  int first = -1;
  for (int n = 1; n <= 30 && first < 0; ++n) {
    const auto out = env.step(s, Vector(Eigen::Vector2d(1, 0)), rng);
    if (out.cost > 0) first = n;
    s = out.next_state;
  }
  EXPECT_EQ(expected, 10);
  EXPECT_EQ(first, expected);
}

TEST(PointCircle, ActionsAreClipped) {
  const PointCircleEnv env(PointCircleSpec{});
  const Vector s = Vector::Zero(4);
  EXPECT_EQ(env.dynamics(s, Vector(Eigen::Vector2d(5, -3))), env.dynamics(s, Vector(Eigen::Vector2d(1, -1))));
  Rng rng(1);
  EXPECT_NEAR(env.step(s, Vector(Eigen::Vector2d(5, 0)), rng).reward,
              env.step(s, Vector(Eigen::Vector2d(1, 0)), rng).reward, 1e-15);
}

TEST(PointCircle, MatchesAnalyticIntegrationToSecondOrder) {
  // u(t) = (cos t, sin t) from rest: x(t) = 1 - cos t, y(t) = t - sin t.
  auto error_for = [](double dt) {
    PointCircleSpec spec;
    spec.dt = dt;
    const PointCircleEnv env(spec);
    Vector s = Vector::Zero(4);
    const int steps = static_cast<int>(std::lround(1.0 / dt));
    for (int k = 0; k < steps; ++k) {
      const double tm = (k + 0.5) * dt;  // midpoint sample of the control
      s = env.dynamics(s, Vector(Eigen::Vector2d(std::cos(tm), std::sin(tm))));
    }
    const double T = steps * dt;
    Vector exact(4);
    exact << 1 - std::cos(T), T - std::sin(T), std::sin(T), 1 - std::cos(T);
    return (s - exact).cwiseAbs().maxCoeff();
  };
  const double e1 = error_for(0.02), e2 = error_for(0.01);
  EXPECT_LT(e1, 0.02 * 0.02);
  EXPECT_NEAR(e1 / e2, 4.0, 0.5);
}

TEST(PointCircle, RewardIsTangentialProgressMinusEffort) {
  PointCircleSpec spec;
  const PointCircleEnv env(spec);
  Vector s2(4);
  s2 << 1.0, 0.0, 0.0, 0.8;  // on the circle, moving counter-clockwise
  EXPECT_NEAR(env.reward(Vector::Zero(2), s2), 0.8, 1e-15);
  EXPECT_NEAR(env.reward(Vector(Eigen::Vector2d(1, 0)), s2), 0.8 - spec.control_cost, 1e-15);
  s2 << 0.0, 2.0, -0.5, 0.0;  // off the circle by 1
  EXPECT_NEAR(env.reward(Vector::Zero(2), s2), 1.0 / 2.0, 1e-15);
  EXPECT_EQ(env.cost(s2, s2, s2), 0.0);
  s2[0] = -0.51;
  EXPECT_EQ(env.cost(s2, s2, s2), 1.0);
}

TEST(PointCircle, InvalidGeometryRejected) {
  PointCircleSpec spec;
  spec.half_width = 0.0;
  EXPECT_THROW(PointCircleEnv{spec}, InvalidArgument);
  spec = PointCircleSpec{};
  spec.horizon = 0;
  EXPECT_THROW(PointCircleEnv{spec}, InvalidArgument);
}

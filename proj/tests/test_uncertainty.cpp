#include "cmbpo/uncertainty.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cmbpo;

namespace {

GaussianPrediction g1(double mean, double var) {
  GaussianPrediction p;
  p.mean = Vector::Constant(1, mean);
  p.var = Vector::Constant(1, var);
  p.reward_mean = 0.0;
  p.reward_var = 1.0;
  return p;
}

/// Ensemble whose members predict state-independent deltas `means[m]` with
/// unit variance in one state dimension.
EnsembleModel constant_ensemble(const std::vector<double>& means) {
  EnsembleConfig cfg;
  cfg.members = static_cast<int>(means.size());
  cfg.elites = cfg.members;
  cfg.hidden = {};
  EnsembleModel m(1, 1, cfg, 0);
  const double raw_unit = std::log(std::exp(1.0) - 1.0);
  for (std::size_t k = 0; k < means.size(); ++k) {
    auto& net = m.member(static_cast<Index>(k)).net();
    net.set_params(Vector::Zero(net.n_params()));
    net.bias(0) << means[k], 0.0, raw_unit, raw_unit;
  }
  std::vector<Index> all(means.size());
  std::iota(all.begin(), all.end(), Index{0});
  m.set_elites(all);
  return m;
}

}  // namespace

TEST(GaussianKl, ClosedFormExamples) {
  EXPECT_EQ(gaussian_kl(g1(0.3, 2.0), g1(0.3, 2.0)), 0.0);
  EXPECT_NEAR(gaussian_kl(g1(0.0, 1.0), g1(1.0, 1.0)), 0.5, 1e-15);
  EXPECT_NEAR(gaussian_kl(g1(0.0, 1.0), g1(0.0, 4.0)), 0.5 * (std::log(4.0) - 1.0 + 0.25), 1e-15);
  EXPECT_NEAR(gaussian_kl(g1(0.0, 1.0), g1(0.0, 4.0)), 0.318147, 1e-6);
}

TEST(GaussianKl, MatchesNumericalIntegration) {
  Rng rng(101);
  for (int i = 0; i < 50; ++i) {
    const double mp = rng.uniform(-2, 2), mq = rng.uniform(-2, 2);
    const double vp = std::exp(rng.uniform(-2, 1.5)), vq = std::exp(rng.uniform(-2, 1.5));
    EXPECT_NEAR(gaussian_kl(g1(mp, vp), g1(mq, vq)), cmbpo::testing::numeric_gaussian_kl_1d(mp, vp, mq, vq), 1e-6);
  }
}

TEST(GaussianKl, NonNegativeOnRandomPairs) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const Vector mp = rng.normal_vector(3), mq = rng.normal_vector(3);
    const Vector vp = rng.normal_vector(3).array().exp(), vq = rng.normal_vector(3).array().exp();
    EXPECT_GT(gaussian_kl(mp, vp, mq, vq), 0.0);
    EXPECT_EQ(gaussian_kl(mp, vp, mp, vp), 0.0);
  }
}

TEST(GaussianKl, RejectsNonPositiveVariance) {
  EXPECT_THROW(gaussian_kl(g1(0, 0.0), g1(0, 1.0)), InvalidArgument);
  EXPECT_THROW(gaussian_kl(g1(0, 1.0), g1(0, -1.0)), InvalidArgument);
}

TEST(Disagreement, TwoMembersIsHalfSymmetrisedKl) {
  const auto p = g1(0.2, 0.5), q = g1(-0.4, 1.7);
  EXPECT_NEAR(ensemble_disagreement({p, q}), 0.5 * (gaussian_kl(p, q) + gaussian_kl(q, p)), 1e-15);
  EXPECT_EQ(ensemble_disagreement({p, p, p}), 0.0);
  EXPECT_THROW(ensemble_disagreement({p}), InvalidArgument);
}

TEST(Disagreement, ThreeMembersMatchHandPairwiseAverage) {
  // Unit variances, means 0, 1, 3: each ordered pair contributes (dmu)^2 / 2.
  const double expected = (2 * 0.5 + 2 * 2.0 + 2 * 4.5) / 6.0;
  EXPECT_NEAR(ensemble_disagreement({g1(0, 1), g1(1, 1), g1(3, 1)}), expected, 1e-15);
}

TEST(Disagreement, PermutationAndAffineInvariance) {
  Rng rng(8);
  std::vector<GaussianPrediction> preds;
  for (int m = 0; m < 5; ++m) {
    GaussianPrediction p;
    p.mean = rng.normal_vector(3);
    p.var = rng.normal_vector(3).array().exp();
    preds.push_back(p);
  }
  const double base = ensemble_disagreement(preds);
  auto shuffled = preds;
  std::reverse(shuffled.begin(), shuffled.end());
  std::swap(shuffled[0], shuffled[2]);
  EXPECT_NEAR(ensemble_disagreement(shuffled), base, 1e-13);
  Vector scale(3), shift(3);
  scale << 2.5, 0.1, 7.0;
  shift << -1.0, 4.0, 0.3;
  auto scaled = preds;
  for (auto& p : scaled) {
    p.mean = p.mean.cwiseProduct(scale) + shift;
    p.var = p.var.cwiseProduct(scale.cwiseAbs2());
  }
  EXPECT_NEAR(ensemble_disagreement(scaled), base, 1e-12);
}

TEST(Disagreement, ModelOverloadUsesAllMembers) {
  const auto m = constant_ensemble({0.0, 1.0, 3.0});
  EXPECT_NEAR(ensemble_disagreement(m, Vector(Vector::Zero(1)), Vector(Vector::Zero(1))), 14.0 / 6.0, 1e-12);
}

TEST(UpdateMixing, Examples) {
  UncertaintyBudget b;
  b.d_m = 0.1;
  EXPECT_DOUBLE_EQ(update_mixing(0.2, b), 0.5);
  EXPECT_DOUBLE_EQ(b.alpha, 0.5);
  EXPECT_DOUBLE_EQ(update_mixing(0.4, b), 0.75);
  EXPECT_DOUBLE_EQ(update_mixing(0.05, b), b.alpha_floor);
  EXPECT_DOUBLE_EQ(update_mixing(0.0, b), b.alpha_floor);
}

TEST(UpdateMixing, ConstraintHoldsExactlyOnRandomInputs) {
  Rng rng(3);
  for (int i = 0; i < 20000; ++i) {
    UncertaintyBudget b;
    b.d_m = std::exp(rng.uniform(-12, 2));
    const double dbar = std::exp(rng.uniform(-12, 4));
    const double a = update_mixing(dbar, b);
    ASSERT_LE((1.0 - a) * dbar, b.d_m) << "dbar " << dbar << " d_m " << b.d_m;
    ASSERT_GE(a, b.alpha_floor);
    ASSERT_LE(a, 1.0);
  }
}

TEST(HorizonGate, Examples) {
  UncertaintyBudget b;
  b.d_H = 1.0;
  double cum = 0.0;
  int length = 0;
  while (length < b.max_horizon && horizon_gate(cum, 0.3, b)) {
    cum += 0.3;
    ++length;
  }
  EXPECT_EQ(length, 3);
  EXPECT_TRUE(horizon_gate(0.7, 0.0, b));
  EXPECT_TRUE(horizon_gate(1.0, 0.0, b));
  EXPECT_FALSE(horizon_gate(1.0, 1e-12, b));
  EXPECT_THROW(horizon_gate(-0.1, 0.0, b), InvalidArgument);
}

TEST(Calibration, BudgetsFollowFormulas) {
  // Means 0 and sqrt(0.1), unit variance: each KL is 0.05.
  const auto m = constant_ensemble({0.0, std::sqrt(0.1)});
  Rng rng(2);
  const Matrix S = Matrix::Random(1, 40), A = Matrix::Random(1, 40);
  ActionSampler pi = [](const Matrix& s, Rng& r) {
    Matrix a(1, s.cols());
    for (Index j = 0; j < s.cols(); ++j) a(0, j) = r.normal();
    return a;
  };
  const auto b = calibrate_budgets(m, S, A, pi, 0.4, 5, 2.0, rng);
  EXPECT_NEAR(b.initial_disagreement, 0.05, 1e-12);
  EXPECT_NEAR(b.d_m, 0.03, 1e-12);
  EXPECT_NEAR(b.d_H, 0.25, 1e-12);
  EXPECT_DOUBLE_EQ(b.alpha, 0.4);
  EXPECT_EQ(b.h0, 5);

  const auto m2 = constant_ensemble({0.0, 0.2});  // per-step disagreement 0.02
  const auto b2 = calibrate_budgets(m2, S, A, pi, 0.5, 5, 2.0, rng);
  EXPECT_NEAR(b2.d_H, 0.10, 1e-12);
}

TEST(Calibration, TerminalStopsAccumulation) {
  const auto m = constant_ensemble({0.0, 0.2});
  Rng rng(2);
  const Matrix S = Matrix::Zero(1, 10), A = Matrix::Zero(1, 10);
  ActionSampler pi = [](const Matrix& s, Rng&) { return Matrix::Zero(1, s.cols()); };
  CalibrationOptions opt;
  opt.terminal = [](const Vector&, const Vector&, const Vector&) { return true; };
  const auto b = calibrate_budgets(m, S, A, pi, 0.5, 5, 2.0, rng, opt);
  EXPECT_NEAR(b.d_H, 0.02, 1e-12);
}

TEST(Calibration, RejectsEmptyOrUntrained) {
  const auto m = constant_ensemble({0.0, 0.2});
  Rng rng(1);
  ActionSampler pi = [](const Matrix& s, Rng&) { return Matrix::Zero(1, s.cols()); };
  EXPECT_THROW(calibrate_budgets(m, Matrix(1, 0), Matrix(1, 0), pi, 0.5, 5, 2.0, rng), DataError);
  EnsembleConfig cfg;
  cfg.members = 2;
  cfg.elites = 1;
  cfg.hidden = {};
  EnsembleModel fresh(1, 1, cfg, 0);
  EXPECT_THROW(calibrate_budgets(fresh, Matrix::Zero(1, 2), Matrix::Zero(1, 2), pi, 0.5, 5, 2.0, rng), DataError);
}

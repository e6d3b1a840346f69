#include "cmbpo/cpo.hpp"
#include "cmbpo/gae.hpp"
#include "cmbpo/policy.hpp"
#include "cmbpo/value_function.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace cmbpo;
using cmbpo::testing::finite_difference_gradient;
using cmbpo::testing::relative_error;

namespace {

LinearOperator dense(const Matrix& H) {
  return [H](const Vector& v) { return Vector(H * v); };
}

Matrix random_spd(Index n, Rng& rng) {
  Matrix A(n, n);
  for (Index i = 0; i < n; ++i) A.col(i) = rng.normal_vector(n);
  return A * A.transpose() + 0.5 * Matrix::Identity(n, n);
}

/// States for a SoftmaxTablePolicy: the state index in the first row.
Matrix index_states(const std::vector<int>& idx) {
  Matrix S(1, static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) S(0, static_cast<Index>(j)) = idx[j];
  return S;
}

Matrix one_hot_actions(const std::vector<int>& acts, Index n) {
  Matrix A = Matrix::Zero(n, static_cast<Index>(acts.size()));
  for (std::size_t j = 0; j < acts.size(); ++j) A(acts[j], static_cast<Index>(j)) = 1.0;
  return A;
}

/// Dense Hessian of f at x by central second differences.
Matrix fd_hessian(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  const Index n = x.size();
  Matrix H(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) {
      auto at = [&](double si, double sj) {
        Vector y = x;
        y[i] += si * h;
        y[j] += sj * h;
        return f(y);
      };
      H(i, j) = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h * h);
    }
  return H;
}

}  // namespace

TEST(Gae, HandRecursion) {
  Vector r(3);
  r << 1, 1, 1;
  const auto res = gae_advantages(r, Vector::Zero(3), 0.0, 0.9, 0.5);
  EXPECT_NEAR(res.advantages[2], 1.0, 1e-15);
  EXPECT_NEAR(res.advantages[1], 1.45, 1e-15);
  EXPECT_NEAR(res.advantages[0], 1.0 + 0.45 * 1.45, 1e-15);
  EXPECT_NEAR(res.advantages[0], 1.6525, 1e-15);
  EXPECT_EQ(res.targets, res.advantages);
}

TEST(Gae, LambdaZeroIsTdResidual) {
  Vector r(4), v(4);
  r << 0.5, -1, 2, 0.3;
  v << 0.1, 0.7, -0.2, 1.1;
  const double boot = 0.4, g = 0.95;
  const auto res = gae_advantages(r, v, boot, g, 0.0);
  for (Index t = 0; t < 4; ++t) {
    const double next = t + 1 < 4 ? v[t + 1] : boot;
    EXPECT_NEAR(res.advantages[t], r[t] + g * next - v[t], 1e-14);
  }
}

TEST(Gae, LambdaOneIsReturnToGoMinusValue) {
  Vector r(4), v(4);
  r << 0.5, -1, 2, 0.3;
  v << 0.1, 0.7, -0.2, 1.1;
  const double g = 0.9;
  const auto res = gae_advantages(r, v, 0.0, g, 1.0);
  for (Index t = 0; t < 4; ++t) {
    double ret = 0.0, w = 1.0;
    for (Index k = t; k < 4; ++k, w *= g) ret += w * r[k];
    EXPECT_NEAR(res.advantages[t], ret - v[t], 1e-14);
    EXPECT_NEAR(res.targets[t], ret, 1e-14);
  }
}

TEST(Gae, EmptyTrajectoryThrows) { EXPECT_THROW(gae_advantages(Vector(0), Vector(0), 0, 0.9, 0.9), InvalidArgument); }

TEST(Gae, NormalisationZeroMeanUnitVariance) {
  Vector a(5);
  a << 1, 2, 3, 4, 10;
  const Vector n = normalize_advantages(a);
  EXPECT_NEAR(n.mean(), 0.0, 1e-14);
  EXPECT_NEAR((n.array() - n.mean()).square().mean(), 1.0, 1e-6);
  EXPECT_LT(normalize_advantages(Vector::Constant(4, 3.0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConjugateGradient, IdentityInOneIteration) {
  Vector g(3);
  g << 1, -2, 3;
  EXPECT_LT((conjugate_gradient(dense(Matrix::Identity(3, 3)), g, 1) - g).norm(), 1e-15);
}

TEST(ConjugateGradient, DiagonalSystem) {
  Vector d(3), g(3);
  d << 1, 2, 4;
  g << 1, 1, 1;
  const Vector x = conjugate_gradient(dense(d.asDiagonal()), g, 10);
  EXPECT_LT((x - g.cwiseQuotient(d)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(ConjugateGradient, MatchesDenseSolve) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix H = random_spd(10, rng);
    const Vector g = rng.normal_vector(10);
    const Vector x = conjugate_gradient(dense(H), g, 10);
    EXPECT_LT((x - H.ldlt().solve(g)).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(CpoStep, PureTrustRegionStep) {
  CpoConfig cfg;
  Vector g(3);
  g << 0.3, -1.2, 0.5;
  const auto d = cpo_step(g, Vector::Zero(3), -1.0, dense(Matrix::Identity(3, 3)), cfg);
  EXPECT_EQ(d.optim_case, CpoCase::Unconstrained);
  const Vector expected = std::sqrt(2 * cfg.target_kl / g.squaredNorm()) * g;
  EXPECT_LT((d.x - expected).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(CpoStep, ZeroGradientWithSlackGivesZero) {
  CpoConfig cfg;
  Vector b(2);
  b << 0.4, -0.1;
  EXPECT_LT(cpo_step(Vector::Zero(2), Vector::Zero(2), -0.5, dense(Matrix::Identity(2, 2)), cfg).x.norm(), 1e-12);
  EXPECT_LT(cpo_step(Vector::Zero(2), b, -0.5, dense(Matrix::Identity(2, 2)), cfg).x.norm(), 1e-12);
}

TEST(CpoStep, RecoveryDirectionOnTwoDimensionalToy) {
  CpoConfig cfg;
  Matrix H = Vector(Eigen::Vector2d(1, 2)).asDiagonal();
  Vector b(2), g(2);
  b << 1, 1;
  g << 0.7, -0.2;
  const auto d = cpo_step(g, b, 1.0, dense(H), cfg);
  ASSERT_EQ(d.optim_case, CpoCase::Recovery);
  const Vector hinv_b = H.ldlt().solve(b);
  const Vector expected = -std::sqrt(2 * cfg.target_kl / b.dot(hinv_b)) * hinv_b;
  EXPECT_LT((d.x - expected).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT(b.dot(d.x), 0.0);
}

TEST(CpoStep, ActiveCaseSatisfiesLinearisedConstraint) {
  CpoConfig cfg;
  Rng rng(4);
  const Matrix H = random_spd(4, rng);
  const Vector g = rng.normal_vector(4);
  const Vector b = g;  // cost grows along the reward gradient
  const auto d = cpo_step(g, b, -0.01, dense(H), cfg);
  ASSERT_EQ(d.optim_case, CpoCase::Active);
  EXPECT_LE(b.dot(d.x) - 0.01, 1e-6);
  EXPECT_GT(g.dot(d.x), -1e-12);
}

TEST(CpoStep, TrustRegionHoldsOnRandomInputs) {
  CpoConfig cfg;
  Rng rng(9);
  std::map<CpoCase, int> seen;
  for (int trial = 0; trial < 2000; ++trial) {
    const Index n = 2 + static_cast<Index>(rng.index(5));
    const Matrix H = random_spd(n, rng);
    const Vector g = rng.normal_vector(n), b = rng.normal_vector(n) * std::exp(rng.uniform(-3, 1));
    const double c = rng.uniform(-0.5, 0.5);
    const auto d = cpo_step(g, b, c, dense(H), cfg);
    ++seen[d.optim_case];
    ASSERT_LE(0.5 * d.x.dot(H * d.x), cfg.target_kl * (1 + 1e-6));
    if (d.optim_case == CpoCase::Recovery) {
      ASSERT_LT(b.dot(d.x), 0.0);
    }
  }
  EXPECT_GT(seen[CpoCase::Recovery], 0);
  EXPECT_GT(seen[CpoCase::Active], 0);
  EXPECT_GT(seen[CpoCase::Inactive], 0);
}

TEST(SurrogateGrads, ZeroAdvantagesGiveZeroGradient) {
  SoftmaxTablePolicy pi(2, 3);
  PolicyBatch batch;
  batch.states = index_states({0, 1, 1});
  batch.actions = one_hot_actions({0, 2, 1}, 3);
  batch.old_log_prob = pi.log_prob(batch.states, batch.actions);
  batch.advantages = Vector::Zero(3);
  batch.cost_advantages = Vector::Zero(3);
  const auto s = surrogate_grads(pi, batch, 0.1, 0.2);
  EXPECT_EQ(s.g.norm(), 0.0);
  EXPECT_EQ(s.b.norm(), 0.0);
  EXPECT_LT(s.c_slack, 0.0);
}

TEST(SurrogateGrads, TwoActionExampleMatchesFiniteDifferences) {
  SoftmaxTablePolicy pi(1, 2);
  Vector theta(2);
  theta << 0.3, -0.4;
  pi.set_params(theta);
  PolicyBatch batch;
  batch.states = index_states({0, 0});
  batch.actions = one_hot_actions({0, 1}, 2);
  batch.old_log_prob = pi.log_prob(batch.states, batch.actions);
  batch.advantages = Vector(Eigen::Vector2d(1, -1));
  batch.cost_advantages = Vector::Zero(2);
  const auto s = surrogate_grads(pi, batch, 0.0, 1.0);
  auto f = [&](const Vector& p) {
    SoftmaxTablePolicy q = pi;
    q.set_params(p);
    return surrogate_values(q, batch).surr;
  };
  EXPECT_LT((s.g - finite_difference_gradient(f, theta)).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(SurrogateGrads, MatchFiniteDifferencesAtRandomPoints) {
  Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    SoftmaxTablePolicy pi(4, 3);
    pi.set_params(rng.normal_vector(12));
    PolicyBatch batch;
    std::vector<int> st, ac;
    for (int j = 0; j < 10; ++j) {
      st.push_back(static_cast<int>(rng.index(4)));
      ac.push_back(static_cast<int>(rng.index(3)));
    }
    batch.states = index_states(st);
    batch.actions = one_hot_actions(ac, 3);
    SoftmaxTablePolicy old(4, 3);
    old.set_params(pi.params() + 0.3 * rng.normal_vector(12));
    batch.old_log_prob = old.log_prob(batch.states, batch.actions);
    batch.advantages = rng.normal_vector(10);
    batch.cost_advantages = rng.normal_vector(10);
    const double scale = 1.7;
    const auto s = surrogate_grads(pi, batch, 0.0, 0.0, scale);
    auto fr = [&](const Vector& p) {
      SoftmaxTablePolicy q = pi;
      q.set_params(p);
      return surrogate_values(q, batch, scale).surr;
    };
    auto fc = [&](const Vector& p) {
      SoftmaxTablePolicy q = pi;
      q.set_params(p);
      return surrogate_values(q, batch, scale).cost_surr;
    };
    worst = std::max(worst, relative_error(s.g, finite_difference_gradient(fr, pi.params())));
    worst = std::max(worst, relative_error(s.b, finite_difference_gradient(fc, pi.params())));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(SurrogateGrads, GaussianPolicyMatchesFiniteDifferences) {
  Rng rng(22);
  GaussianMlpPolicy pi(3, 2, {5}, -0.3, rng);
  Vector p = pi.params() + 0.2 * rng.normal_vector(pi.n_params());
  pi.set_params(p);
  PolicyBatch batch;
  batch.states = Matrix::Random(3, 8);
  batch.actions = pi.sample(batch.states, rng);
  batch.old_log_prob = pi.log_prob(batch.states, batch.actions).array() + 0.1;
  batch.advantages = rng.normal_vector(8);
  batch.cost_advantages = rng.normal_vector(8);
  const auto s = surrogate_grads(pi, batch, 0.0, 0.0);
  auto f = [&](const Vector& q) {
    GaussianMlpPolicy c = pi;
    c.set_params(q);
    return surrogate_values(c, batch).surr;
  };
  EXPECT_LE(relative_error(s.g, finite_difference_gradient(f, pi.params())), 1e-4);
}

TEST(SurrogateGrads, ConstantShiftOfAdvantagesRemovedByNormalisation) {
  Rng rng(30);
  SoftmaxTablePolicy pi(3, 2);
  pi.set_params(rng.normal_vector(6));
  PolicyBatch batch;
  batch.states = index_states({0, 1, 2, 0, 1});
  batch.actions = one_hot_actions({0, 1, 1, 1, 0}, 2);
  batch.old_log_prob = pi.log_prob(batch.states, batch.actions);
  const Vector raw = rng.normal_vector(5);
  batch.cost_advantages = Vector::Zero(5);
  batch.advantages = normalize_advantages(raw);
  const Vector g1 = surrogate_grads(pi, batch, 0, 1).g;
  batch.advantages = normalize_advantages(raw.array() + 12.5);
  const Vector g2 = surrogate_grads(pi, batch, 0, 1).g;
  EXPECT_LT((g1 - g2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FisherVectorProduct, SoftmaxMatchesDenseKlHessian) {
  Rng rng(40);
  SoftmaxTablePolicy pi(3, 3);
  pi.set_params(rng.normal_vector(9));
  const Matrix S = index_states({0, 1, 2, 2, 0, 2});
  auto f = [&](const Vector& p) {
    SoftmaxTablePolicy q = pi;
    q.set_params(p);
    return pi.kl(q, S).mean();
  };
  const Matrix H = fd_hessian(f, pi.params(), 1e-4);
  for (int trial = 0; trial < 5; ++trial) {
    const Vector v = rng.normal_vector(9);
    EXPECT_LT((fisher_vector_product(pi, S, v, 0.0) - H * v).cwiseAbs().maxCoeff(), 1e-6);
  }
  EXPECT_EQ(fisher_vector_product(pi, S, Vector::Zero(9), 0.1).norm(), 0.0);
}

TEST(FisherVectorProduct, GaussianMatchesDenseKlHessian) {
  Rng rng(41);
  GaussianMlpPolicy pi(2, 2, {3}, -0.2, rng);
  pi.set_params(pi.params() + 0.3 * rng.normal_vector(pi.n_params()));
  const Matrix S = Matrix::Random(2, 4);
  auto f = [&](const Vector& p) {
    GaussianMlpPolicy q = pi;
    q.set_params(p);
    return pi.kl(q, S).mean();
  };
  const Matrix H = fd_hessian(f, pi.params(), 1e-4);
  const Vector v = rng.normal_vector(pi.n_params());
  EXPECT_LT((fisher_vector_product(pi, S, v, 0.0) - H * v).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FisherVectorProduct, DampedProductIsPositiveDefinite) {
  Rng rng(42);
  SoftmaxTablePolicy pi(4, 3);
  pi.set_params(rng.normal_vector(12));
  const Matrix S = index_states({0, 1, 3});
  for (int trial = 0; trial < 100; ++trial) {
    const Vector v = rng.normal_vector(12);
    EXPECT_GE(v.dot(fisher_vector_product(pi, S, v, 0.1)), 0.1 * v.squaredNorm() - 1e-12);
  }
}

namespace {

struct LineSearchToy {
  SoftmaxTablePolicy pi{1, 2};
  PolicyBatch batch;
  LineSearchToy() {
    batch.states = index_states({0, 0});
    batch.actions = one_hot_actions({0, 1}, 2);
    batch.old_log_prob = pi.log_prob(batch.states, batch.actions);
    batch.advantages = Vector(Eigen::Vector2d(1, -1));
    batch.cost_advantages = Vector::Zero(2);
  }
  /// KL(pi' || pi) after moving the logits by t (+1, -1).
  double kl_at(double t) const {
    SoftmaxTablePolicy q = pi;
    q.set_params(Vector(Eigen::Vector2d(t, -t)));
    return q.kl(pi, index_states({0})).mean();
  }
};

}  // namespace

TEST(LineSearch, ZeroDirectionAcceptedImmediately) {
  LineSearchToy toy;
  CpoDirection dir;
  dir.x = Vector::Zero(2);
  const auto res = line_search(toy.pi, dir, toy.batch, -1.0, CpoConfig{});
  EXPECT_TRUE(res.accepted);
  EXPECT_EQ(res.backtracks, 0);
  EXPECT_EQ(toy.pi.params(), Vector::Zero(2));
}

TEST(LineSearch, BacktracksUntilKlFits) {
  LineSearchToy toy;
  CpoConfig cfg;
  // Choose t so that the KL limit falls between 0.8^3 t and 0.8^2 t.
  double lo = 0.0, hi = 10.0;
  const double target = std::pow(0.8, 2.5);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (toy.kl_at(mid * target) > cfg.target_kl ? hi : lo) = mid;
  }
  const double t = 0.5 * (lo + hi);
  ASSERT_GT(toy.kl_at(t * 0.64), cfg.target_kl);
  ASSERT_LE(toy.kl_at(t * 0.512), cfg.target_kl);
  CpoDirection dir;
  dir.optim_case = CpoCase::Unconstrained;
  dir.x = Vector(Eigen::Vector2d(t, -t));
  const auto res = line_search(toy.pi, dir, toy.batch, -1.0, cfg);
  EXPECT_TRUE(res.accepted);
  EXPECT_EQ(res.backtracks, 3);
  EXPECT_LE(res.kl, cfg.target_kl);
  EXPECT_GT(res.surr_improvement, 0.0);
}

TEST(LineSearch, ExhaustionLeavesParametersUnchanged) {
  LineSearchToy toy;
  Vector start(2);
  start << 0.1, 0.2;
  toy.pi.set_params(start);
  toy.batch.old_log_prob = toy.pi.log_prob(toy.batch.states, toy.batch.actions);
  CpoDirection dir;
  dir.optim_case = CpoCase::Unconstrained;
  dir.x = Vector(Eigen::Vector2d(50, -50));
  const auto res = line_search(toy.pi, dir, toy.batch, -1.0, CpoConfig{});
  EXPECT_FALSE(res.accepted);
  EXPECT_EQ(toy.pi.params(), start);
}

TEST(LineSearch, RejectsStepsThatWorsenReturn) {
  LineSearchToy toy;
  CpoDirection dir;
  dir.optim_case = CpoCase::Active;
  dir.x = Vector(Eigen::Vector2d(-0.01, 0.01));  // towards the bad action
  EXPECT_FALSE(line_search(toy.pi, dir, toy.batch, -1.0, CpoConfig{}).accepted);
  dir.optim_case = CpoCase::Recovery;  // recovery only has to respect KL and cost
  EXPECT_TRUE(line_search(toy.pi, dir, toy.batch, 1.0, CpoConfig{}).accepted);
}

TEST(ValueFit, PerfectTargetsLeaveParametersUnchanged) {
  Rng rng(50);
  ValueFunction vf(2, {8}, rng, 3e-4);
  const Matrix S = Matrix::Random(2, 30);
  const Vector before = vf.net().params();
  const auto hist = value_fit(vf, S, vf.predict(S), ValueFitConfig{5, 8, 3e-4}, rng);
  for (double l : hist) EXPECT_LT(l, 1e-24);
  EXPECT_LT((vf.net().params() - before).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ValueFit, ConvergesToConstantTarget) {
  Rng rng(51);
  ValueFunction vf(2, {16}, rng, 1e-2);
  const Matrix S = Matrix::Random(2, 64);
  value_fit(vf, S, Vector::Constant(64, 3.0), ValueFitConfig{200, 16, 1e-2}, rng);
  const Vector pred = vf.predict(S);
  EXPECT_LT((pred.array() - 3.0).abs().maxCoeff(), 0.3);
}

TEST(ValueFit, ConvexFitLossDecreases) {
  Rng rng(52);
  ValueFunction vf(3, {}, rng, 1e-2);
  const Matrix S = Matrix::Random(3, 100);
  const Vector targets = (S.transpose() * Eigen::Vector3d(1.0, -2.0, 0.5)).array() + 0.3;
  const auto hist = value_fit(vf, S, targets, ValueFitConfig{3, 100, 1e-2}, rng);
  ASSERT_EQ(hist.size(), 3u);
  EXPECT_LT(hist[1], hist[0]);
  EXPECT_LT(hist[2], hist[1]);
  EXPECT_THROW(value_fit(vf, Matrix(3, 0), Vector(0), ValueFitConfig{}, rng), InvalidArgument);
}

TEST(ValueFit, OutputRescaleKeepsPredictions) {
  Rng rng(53);
  ValueFunction vf(3, {8, 8}, rng, 1e-3);
  const Matrix S = Matrix::Random(3, 20);
  const Vector before = vf.predict(S);
  vf.set_output_scale(40.0, 7.5);
  EXPECT_LT((vf.predict(S) - before).cwiseAbs().maxCoeff(), 1e-12);
  vf.set_output_scale(-3.0, 0.25);
  EXPECT_LT((vf.predict(S) - before).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(vf.set_output_scale(0.0, 0.0), InvalidArgument);
}

TEST(ValueFit, NormalisedTargetsReachLargeScaleQuickly) {
  // Targets around 100: a few short fits get close only with normalisation.
  const Matrix S = Matrix::Random(2, 128);
  const Vector targets = (100.0 + 20.0 * S.row(0).array()).transpose();
  double err[2];
  for (int k = 0; k < 2; ++k) {
    Rng rng(54);
    ValueFunction vf(2, {16}, rng, 1e-3);
    ValueFitConfig cfg{20, 32, 1e-3, k == 1};
    value_fit(vf, S, targets, cfg, rng);
    err[k] = (vf.predict(S) - targets).cwiseAbs().mean();
  }
  EXPECT_GT(err[0], 50.0);
  EXPECT_LT(err[1], 5.0);
}

TEST(Policies, SoftmaxSamplingAndLogProb) {
  SoftmaxTablePolicy pi(2, 3);
  Vector p(6);
  p << 0, 0, 0, 5, 0, 0;
  pi.set_params(p);
  EXPECT_NEAR(pi.probs(0).sum(), 1.0, 1e-15);
  EXPECT_NEAR(pi.log_prob(index_states({0}), one_hot_actions({2}, 3))[0], std::log(1.0 / 3.0), 1e-14);
  EXPECT_EQ(one_hot_index(pi.mode(index_states({1})).col(0)), 0);
  EXPECT_THROW(pi.log_prob(index_states({2}), one_hot_actions({0}, 3)), InvalidArgument);
}

TEST(Policies, GaussianLogStdIsClamped) {
  Rng rng(1);
  GaussianMlpPolicy pi(2, 2, {4}, -0.5, rng);
  Vector p = pi.params();
  p.tail(2) << -50.0, 9.0;
  pi.set_params(p);
  EXPECT_DOUBLE_EQ(pi.log_std()[0], -20.0);
  EXPECT_DOUBLE_EQ(pi.log_std()[1], 2.0);
}

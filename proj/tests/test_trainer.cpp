#include "cmbpo/report.hpp"
#include "cmbpo/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cmbpo;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("cmbpo_trainer_" + name);
  fs::remove_all(d);
  return d;
}

ExperimentConfig tiny_grid(const std::string& algo) {
  auto cfg = ExperimentConfig::defaults_for("gridworld");
  cfg.algo = algo;
  cfg.epochs = 3;
  cfg.steps_per_epoch = 200;
  cfg.init_steps = 200;
  cfg.buffer_capacity = 2000;
  cfg.ensemble.members = 3;
  cfg.ensemble.elites = 2;
  cfg.ensemble.hidden = {16};
  cfg.ensemble.batch_size = 64;
  cfg.ensemble.max_epochs = 5;
  cfg.model_rollouts = 50;
  cfg.probe_samples = 40;
  cfg.calib_rollouts = 30;
  cfg.policy_batch = 300;
  cfg.checkpoint_every = 2;
  return cfg;
}

ExperimentConfig tiny_circle(const std::string& algo) {
  auto cfg = ExperimentConfig::defaults_for("point_circle");
  cfg.algo = algo;
  cfg.epochs = 2;
  cfg.circle.horizon = 50;
  cfg.steps_per_epoch = 100;
  cfg.init_steps = 200;
  cfg.buffer_capacity = 1000;
  cfg.ensemble.members = 3;
  cfg.ensemble.elites = 2;
  cfg.ensemble.hidden = {16};
  cfg.ensemble.batch_size = 64;
  cfg.ensemble.max_epochs = 3;
  cfg.model_rollouts = 20;
  cfg.probe_samples = 20;
  cfg.calib_rollouts = 10;
  cfg.policy_batch = 200;
  cfg.policy_hidden = {8};
  cfg.value_hidden = {8};
  return cfg;
}

}  // namespace

TEST(Trainer, ZeroEpochsWritesHeaderOnlyMetricsAndInitialCheckpoint) {
  const auto dir = fresh_dir("zero");
  auto cfg = tiny_grid("cmbpo");
  cfg.epochs = 0;
  const auto hist = train(cfg, dir.string());
  EXPECT_TRUE(hist.empty());
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "epoch_0000.json"));
  EXPECT_EQ(slurp(dir / "metrics.jsonl"), "");
  const std::string csv = slurp(dir / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  EXPECT_EQ(csv.rfind("epoch,env_steps", 0), 0u);
  EXPECT_TRUE(read_metrics(dir.string()).empty());
  const auto run = load_run(dir.string());
  EXPECT_EQ(run.epochs, 0);
  EXPECT_TRUE(build_report({run}).empty());
}

TEST(Trainer, SameSeedGivesIdenticalMetrics) {
  const auto a = fresh_dir("same_a"), b = fresh_dir("same_b");
  auto cfg = tiny_grid("cmbpo");
  cfg.seed = 11;
  train(cfg, a.string());
  train(cfg, b.string());
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(slurp(a / "checkpoints" / "epoch_0003.json"), slurp(b / "checkpoints" / "epoch_0003.json"));
}

TEST(Trainer, DifferentSeedsDiffer) {
  const auto a = fresh_dir("diff_a"), b = fresh_dir("diff_b");
  auto cfg = tiny_grid("cpo");
  cfg.seed = 1;
  train(cfg, a.string());
  cfg.seed = 2;
  train(cfg, b.string());
  EXPECT_NE(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
}

TEST(Trainer, OutputLayoutAndCounters) {
  const auto dir = fresh_dir("layout");
  const auto cfg = tiny_grid("cmbpo");
  const auto hist = train(cfg, dir.string());
  ASSERT_EQ(hist.size(), 3u);
  for (const char* f : {"config.txt", "metrics.jsonl", "metrics.csv", "meta.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "epoch_0002.json"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "epoch_0003.json"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints" / "epoch_0001.json"));

  const auto back = read_metrics(dir.string());
  ASSERT_EQ(back.size(), hist.size());
  long long prev_steps = cfg.init_steps;
  double prev_cost = 0.0;
  for (std::size_t i = 0; i < hist.size(); ++i) {
    EXPECT_EQ(back[i].epoch, static_cast<int>(i) + 1);
    EXPECT_EQ(back[i].to_json().dump(), hist[i].to_json().dump());
    EXPECT_GE(hist[i].env_steps, prev_steps + cfg.steps_per_epoch);
    EXPECT_GE(hist[i].cum_cost, prev_cost);
    ASSERT_TRUE(hist[i].exact_return.has_value());
    EXPECT_GE(*hist[i].exact_cost, 0.0);
    prev_steps = hist[i].env_steps;
    prev_cost = hist[i].cum_cost;
  }
  const auto run = load_run(dir.string());
  EXPECT_EQ(run.algo, "cmbpo");
  EXPECT_EQ(run.env, "gridworld");
  EXPECT_EQ(run.env_steps, hist.back().env_steps);
}

TEST(Trainer, ConfigFileRoundTripsThroughRunDirectory) {
  const auto dir = fresh_dir("cfg");
  auto cfg = tiny_grid("cpo");
  cfg.epochs = 1;
  train(cfg, dir.string());
  const auto again = load_config_file((dir / "config.txt").string());
  EXPECT_EQ(again.to_map(), cfg.to_map());
}

TEST(Trainer, ObserverSeesMixingInvariantAndHorizonBudget) {
  auto cfg = tiny_grid("cmbpo");
  Trainer trainer(cfg, gridworld_task(cfg), fresh_dir("obs").string());
  int calls = 0;
  trainer.set_observer([&](const EpochView<SoftmaxTablePolicy>& v) {
    ++calls;
    ASSERT_NE(v.budget, nullptr);
    ASSERT_NE(v.ensemble, nullptr);
    EXPECT_LE((1.0 - v.metrics.alpha) * v.metrics.dbar, v.metrics.d_m);
    for (const auto& t : v.model_trajectories) {
      double sum = 0.0;
      for (Index k = 0; k < t.length(); ++k)
        sum += ensemble_disagreement(*v.ensemble, Vector(t.states.col(k)), Vector(t.actions.col(k)));
      EXPECT_LE(sum, v.metrics.d_H * (1.0 + 1e-12));
    }
  });
  trainer.run();
  EXPECT_EQ(calls, cfg.epochs);
}

TEST(Trainer, SeveralPolicyUpdatesPerEpoch) {
  auto cfg = tiny_grid("cmbpo");
  cfg.policy_updates = 3;
  Trainer trainer(cfg, gridworld_task(cfg), fresh_dir("updates").string());
  int calls = 0;
  trainer.set_observer([&](const EpochView<SoftmaxTablePolicy>& v) {
    ++calls;
    EXPECT_LE((1.0 - v.metrics.alpha) * v.metrics.dbar, v.metrics.d_m);
  });
  const auto hist = trainer.run();
  EXPECT_EQ(calls, cfg.epochs * 3);
  ASSERT_EQ(static_cast<int>(hist.size()), cfg.epochs);
  // real data is still collected once per epoch
  EXPECT_GE(hist.back().env_steps, cfg.init_steps + cfg.epochs * cfg.steps_per_epoch);
  EXPECT_LT(hist.back().env_steps, cfg.init_steps + (cfg.epochs + 1) * cfg.steps_per_epoch);
}

TEST(Trainer, ModelFreeBaselineHasNoModel) {
  auto cfg = tiny_grid("cpo");
  Trainer trainer(cfg, gridworld_task(cfg), fresh_dir("cpo").string());
  trainer.set_observer([&](const EpochView<SoftmaxTablePolicy>& v) {
    EXPECT_EQ(v.budget, nullptr);
    EXPECT_EQ(v.ensemble, nullptr);
    EXPECT_TRUE(v.model_trajectories.empty());
    EXPECT_DOUBLE_EQ(v.metrics.alpha, 1.0);
  });
  trainer.run();
  EXPECT_FALSE(trainer.ensemble().has_value());
}

TEST(Trainer, PointCircleRunsBothAlgorithms) {
  for (const char* algo : {"cpo", "cmbpo"}) {
    const auto dir = fresh_dir(std::string("circle_") + algo);
    const auto hist = train(tiny_circle(algo), dir.string());
    ASSERT_EQ(hist.size(), 2u);
    for (const auto& m : hist) {
      EXPECT_TRUE(std::isfinite(m.mean_return));
      EXPECT_GE(m.mean_cost, 0.0);
      EXPECT_FALSE(m.exact_return.has_value());
    }
  }
}

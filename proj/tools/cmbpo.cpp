// Command-line front end: train, verify, report.

#include "cmbpo/report.hpp"
#include "cmbpo/trainer.hpp"
#include "cmbpo/verify.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& out, const std::string& algo) {
  cmbpo::ExperimentConfig cfg = cmbpo::load_config_file(config_path);
  cfg.seed = seed;
  if (!algo.empty()) cfg.algo = algo;
  cfg.validate();
  const auto metrics = cmbpo::train(cfg, out);
  if (!metrics.empty()) {
    const auto& m = metrics.back();
    std::cout << "epochs " << metrics.size() << "  env_steps " << m.env_steps << "  return " << m.mean_return
              << "  episode_cost " << m.mean_cost << "  cum_cost " << m.cum_cost << "\n";
  }
  return 0;
}

int cmd_verify(const cmbpo::VerifyOptions& opt, const std::string& out) {
  const auto sum = cmbpo::run_verification(opt, out);
  std::cout << sum.to_json().dump(2) << "\n";
  return sum.violations == 0 ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& dirs, const cmbpo::ReportOptions& opt, const std::string& out) {
  std::vector<cmbpo::RunSummary> runs;
  for (const auto& d : dirs) runs.push_back(cmbpo::load_run(d, opt));
  const auto rows = cmbpo::build_report(runs, opt);
  if (out.empty()) {
    cmbpo::write_report_csv(std::cout, rows);
  } else {
    std::ofstream f(out);
    if (!f) throw cmbpo::InvalidArgument("cannot write " + out);
    cmbpo::write_report_csv(f, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Constrained model-based policy optimisation experiments"};
  app.require_subcommand(1);

  std::string config_path, out_dir, algo;
  std::uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "Run one training job");
  train->add_option("--config", config_path, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "master seed")->required();
  train->add_option("--out", out_dir, "run directory")->required();
  train->add_option("--algo", algo, "cmbpo or cpo (overrides the config)")->check(CLI::IsMember({"cmbpo", "cpo"}));

  cmbpo::VerifyOptions vopt;
  std::string verify_out;
  auto* verify = app.add_subcommand("verify", "Check the improvement bounds on random tabular CMDPs");
  verify->add_option("--suite", vopt.suite, "boundary, lemma, identity or all")
      ->required()
      ->check(CLI::IsMember({"boundary", "lemma", "identity", "all"}));
  verify->add_option("--trials", vopt.trials, "random instances")->required()->check(CLI::PositiveNumber);
  verify->add_option("--seed", vopt.seed, "generator seed")->required();
  verify->add_option("--out", verify_out, "output directory")->required();
  verify->add_flag("--equal-policies", vopt.equal_policies, "generate candidate = base policy");

  std::vector<std::string> run_dirs;
  cmbpo::ReportOptions ropt;
  std::string report_out;
  double threshold = 0.0;
  auto* report = app.add_subcommand("report", "Summarise finished runs as CSV");
  report->add_option("runs", run_dirs, "run directories")->required();
  auto* thr = report->add_option("--threshold", threshold, "absolute return threshold");
  report->add_option("--fraction", ropt.baseline_fraction, "threshold as a fraction of the baseline return");
  report->add_option("--window", ropt.window, "trailing epochs averaged")->check(CLI::PositiveNumber);
  report->add_option("--out", report_out, "CSV file (default stdout)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config_path, seed, out_dir, algo);
    if (*verify) return cmd_verify(vopt, verify_out);
    if (*report) {
      if (*thr) ropt.threshold = threshold;
      return cmd_report(run_dirs, ropt, report_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

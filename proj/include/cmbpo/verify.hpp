#pragma once

// Randomised verification of the exact policy-improvement bounds on small
// tabular CMDPs. One record per (instance, check); any violation makes the
// run fail.

#include "cmbpo/exact_analysis.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>

namespace cmbpo {

inline constexpr double kIdentityTol = 1e-9;

struct VerifyOptions {
  std::string suite = "all";  ///< boundary | lemma | identity | all
  int trials = 1000;
  std::uint64_t seed = 0;
  bool equal_policies = false;  ///< generator mode with pi' = pi
};

struct VerifySummary {
  int records = 0;
  int violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  std::vector<double> tightness;  ///< sorted, one per record where defined

  double quantile(double q) const {
    if (tightness.empty()) return 0.0;
    const auto i = static_cast<std::size_t>(std::ceil(q * static_cast<double>(tightness.size())));
    return tightness[std::min(tightness.size() - 1, i == 0 ? 0 : i - 1)];
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["records"] = records;
    j["violations"] = violations;
    j["min_slack"] = records ? min_slack : 0.0;
    j["tightness"] = {{"p50", quantile(0.5)}, {"p90", quantile(0.9)}, {"p99", quantile(0.99)}, {"max", quantile(1.0)}};
    return j;
  }
};

namespace detail {

/// Position of delta_j inside the bound interval: 0 at L_m / (1 - gamma), 1 at an edge.
inline double boundary_tightness(const BoundaryReport& r, double gamma) {
  const double half = (r.upper - r.lower) / 2.0;
  if (!(half > 0.0)) return 0.0;
  return std::abs(r.delta_j - r.L_m / (1.0 - gamma)) / half;
}

inline nlohmann::ordered_json boundary_json(const BoundaryReport& r, double gamma) {
  return {{"delta_j", r.delta_j}, {"L_m", r.L_m},       {"lower", r.lower},     {"upper", r.upper},
          {"eps_pi", r.eps_pi},   {"eps_m", r.eps_m},   {"delta_max", r.delta_max}, {"slack", r.slack()},
          {"tightness", boundary_tightness(r, gamma)}, {"holds", r.holds}};
}

}  // namespace detail

/// Writes records.jsonl and summary.json into out_dir (when non-empty).
inline VerifySummary run_verification(const VerifyOptions& opt, const std::string& out_dir = "") {
  const bool all = opt.suite == "all";
  if (!all && opt.suite != "boundary" && opt.suite != "lemma" && opt.suite != "identity")
    throw InvalidArgument("unknown suite '" + opt.suite + "' (expected boundary, lemma, identity or all)");
  require(opt.trials >= 1, "verify: trials must be >= 1");
  std::ofstream records;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    records.open(std::filesystem::path(out_dir) / "records.jsonl", std::ios::trunc);
    if (!records) throw InvalidArgument("cannot write records in " + out_dir);
  }

  VerifySummary sum;
  auto emit = [&](nlohmann::ordered_json rec, bool holds, double slack, std::optional<double> tight) {
    rec["holds"] = holds;
    rec["slack"] = slack;
    ++sum.records;
    if (!holds) ++sum.violations;
    sum.min_slack = std::min(sum.min_slack, slack);
    if (tight) sum.tightness.push_back(*tight);
    if (records) records << rec.dump() << "\n";
  };

  RandomInstanceConfig gen;
  gen.equal_policies = opt.equal_policies;
  Rng master(opt.seed);
  for (int trial = 0; trial < opt.trials; ++trial) {
    Rng rng = master.split();
    const RandomInstance inst = random_instance(rng, gen);
    const double g = inst.cmdp.discount();
    nlohmann::ordered_json base;
    base["trial"] = trial;
    base["n_states"] = inst.cmdp.n_states();
    base["n_actions"] = inst.cmdp.n_actions();
    base["gamma"] = g;
    base["model_mix"] = inst.model_mix;

    if (all || opt.suite == "boundary") {
      const auto rr = boundary_report(inst.cmdp, inst.model_kernel, inst.base, inst.candidate, Signal::reward());
      const auto rc = boundary_report(inst.cmdp, inst.model_kernel, inst.base, inst.candidate, Signal::cost(0));
      auto rec = base;
      rec["check"] = "boundary";
      rec["reward"] = detail::boundary_json(rr, g);
      rec["cost"] = detail::boundary_json(rc, g);
      emit(rec, rr.holds && rc.holds, std::min(rr.slack(), rc.slack()),
           std::max(detail::boundary_tightness(rr, g), detail::boundary_tightness(rc, g)));
    }
    if (all || opt.suite == "lemma") {
      const auto lr = lemma_state_dist_check(inst.cmdp, inst.model_kernel, inst.base, inst.candidate);
      auto rec = base;
      rec["check"] = "lemma";
      rec["lhs_l1"] = lr.lhs_l1;
      rec["rhs_bound"] = lr.rhs_bound;
      emit(rec, lr.holds, lr.rhs_bound - lr.lhs_l1, lr.ratio());
    }
    if (all || opt.suite == "identity") {
      const Vector f = rng.normal_vector(inst.cmdp.n_states());
      const double r1 = return_identity_check(inst.cmdp, inst.base, f, Signal::reward());
      const double r2 = return_identity_check(inst.cmdp, inst.base, f, Signal::cost(0));
      const double r3 = return_difference_residual(inst.cmdp, inst.base, inst.candidate, Signal::reward());
      const double r4 = return_difference_residual(inst.cmdp, inst.base, inst.candidate, Signal::cost(0));
      const double worst = std::max({r1, r2, r3, r4});
      auto rec = base;
      rec["check"] = "identity";
      rec["return_identity_residual"] = std::max(r1, r2);
      rec["difference_residual"] = std::max(r3, r4);
      emit(rec, worst < kIdentityTol, kIdentityTol - worst, std::nullopt);
    }
  }
  std::sort(sum.tightness.begin(), sum.tightness.end());
  if (!out_dir.empty()) {
    std::ofstream s(std::filesystem::path(out_dir) / "summary.json", std::ios::trunc);
    auto j = sum.to_json();
    j["suite"] = opt.suite;
    j["trials"] = opt.trials;
    j["seed"] = opt.seed;
    j["equal_policies"] = opt.equal_policies;
    s << j.dump(2) << "\n";
  }
  return sum;
}

}  // namespace cmbpo

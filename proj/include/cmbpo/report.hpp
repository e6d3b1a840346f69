#pragma once

// Sample-efficiency summary over finished runs: real steps until the return
// first reaches a threshold while the cost limit holds, plus total cost.

#include "cmbpo/metrics.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>

namespace cmbpo {

inline constexpr const char* kNotReached = "not reached";

struct ReportOptions {
  std::optional<double> threshold;  ///< absolute return threshold; default derives from baseline runs
  double baseline_fraction = 0.9;   ///< threshold = fraction * baseline final return
  int window = 5;                   ///< trailing epochs averaged before comparing
  int final_epochs = 10;            ///< epochs averaged for "final" values
};

struct RunSummary {
  std::string run_dir, env, algo;
  std::uint64_t seed = 0;
  double cost_limit = 0.0;
  int epochs = 0;
  long long env_steps = 0;
  double final_return = 0.0, final_cost = 0.0, cum_cost = 0.0;
  std::vector<EpochMetrics> metrics;
};

struct ReportRow {
  RunSummary run;
  double threshold = 0.0;
  std::optional<long long> steps_to_threshold;
  std::optional<double> ratio;  ///< steps over the matching baseline's steps
};

inline double trailing_mean(const std::vector<EpochMetrics>& m, std::size_t end, int window,
                            double EpochMetrics::*field) {
  const std::size_t lo = end > static_cast<std::size_t>(window) ? end - static_cast<std::size_t>(window) : 0;
  double s = 0.0;
  for (std::size_t i = lo; i < end; ++i) s += m[i].*field;
  return end > lo ? s / static_cast<double>(end - lo) : 0.0;
}

inline RunSummary load_run(const std::string& dir, const ReportOptions& opt = {}) {
  const auto meta_path = std::filesystem::path(dir) / "meta.json";
  std::ifstream in(meta_path);
  if (!in) throw DataError("missing " + meta_path.string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt " + meta_path.string() + " (" + e.what() + ")");
  }
  RunSummary r;
  r.run_dir = dir;
  r.env = meta.value("env", std::string());
  r.algo = meta.value("algo", std::string());
  r.seed = meta.value("seed", std::uint64_t{0});
  r.cost_limit = meta.value("cost_limit", 0.0);
  r.metrics = read_metrics(dir);
  r.epochs = static_cast<int>(r.metrics.size());
  if (!r.metrics.empty()) {
    r.env_steps = r.metrics.back().env_steps;
    r.cum_cost = r.metrics.back().cum_cost;
    r.final_return = trailing_mean(r.metrics, r.metrics.size(), opt.final_epochs, &EpochMetrics::mean_return);
    r.final_cost = trailing_mean(r.metrics, r.metrics.size(), opt.final_epochs, &EpochMetrics::mean_cost);
  }
  return r;
}

/// First cumulative step count at which the trailing return reaches the
/// threshold while the trailing episode cost is within the limit.
inline std::optional<long long> steps_to_threshold(const RunSummary& r, double threshold, int window) {
  for (std::size_t i = 1; i <= r.metrics.size(); ++i) {
    const double ret = trailing_mean(r.metrics, i, window, &EpochMetrics::mean_return);
    const double cost = trailing_mean(r.metrics, i, window, &EpochMetrics::mean_cost);
    if (ret >= threshold && cost <= r.cost_limit) return r.metrics[i - 1].env_steps;
  }
  return std::nullopt;
}

/// Rows for every run with at least one epoch. Per env, the default threshold
/// is baseline_fraction times the mean final return of the "cpo" runs (or of
/// all runs when there is no baseline).
inline std::vector<ReportRow> build_report(const std::vector<RunSummary>& runs, const ReportOptions& opt = {}) {
  std::map<std::string, std::vector<const RunSummary*>> by_env;
  for (const auto& r : runs)
    if (r.epochs > 0) by_env[r.env].push_back(&r);
  std::vector<ReportRow> rows;
  for (const auto& [env, group] : by_env) {
    double threshold = 0.0;
    if (opt.threshold) {
      threshold = *opt.threshold;
    } else {
      std::vector<double> base;
      for (const auto* r : group)
        if (r->algo == "cpo") base.push_back(r->final_return);
      if (base.empty())
        for (const auto* r : group) base.push_back(r->final_return);
      threshold = opt.baseline_fraction * std::accumulate(base.begin(), base.end(), 0.0) / static_cast<double>(base.size());
    }
    std::map<std::uint64_t, long long> baseline_steps;
    std::vector<long long> all_baseline;
    for (const auto* r : group)
      if (r->algo == "cpo")
        if (const auto s = steps_to_threshold(*r, threshold, opt.window)) {
          baseline_steps[r->seed] = *s;
          all_baseline.push_back(*s);
        }
    for (const auto* r : group) {
      ReportRow row{*r, threshold, steps_to_threshold(*r, threshold, opt.window), std::nullopt};
      if (row.steps_to_threshold) {
        if (auto it = baseline_steps.find(r->seed); it != baseline_steps.end()) {
          row.ratio = static_cast<double>(*row.steps_to_threshold) / static_cast<double>(it->second);
        } else if (!all_baseline.empty()) {
          const double mean = std::accumulate(all_baseline.begin(), all_baseline.end(), 0.0) /
                              static_cast<double>(all_baseline.size());
          row.ratio = static_cast<double>(*row.steps_to_threshold) / mean;
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "run_dir,env,algo,seed,epochs,env_steps,final_return,final_cost,cost_limit,cum_cost,threshold,"
         "steps_to_threshold,ratio\n";
  for (const auto& r : rows) {
    out << r.run.run_dir << ',' << r.run.env << ',' << r.run.algo << ',' << r.run.seed << ',' << r.run.epochs << ','
        << r.run.env_steps << ',' << r.run.final_return << ',' << r.run.final_cost << ',' << r.run.cost_limit << ','
        << r.run.cum_cost << ',' << r.threshold << ',';
    if (r.steps_to_threshold) out << *r.steps_to_threshold;
    else out << kNotReached;
    out << ',';
    if (r.ratio) out << *r.ratio;
    out << '\n';
  }
}

}  // namespace cmbpo

#pragma once

// Per-epoch training record, written as one JSON object per line plus a CSV
// mirror. No wall-clock fields: identical seeds must give identical files.

#include "cmbpo/common.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cmbpo {

struct EpochMetrics {
  int epoch = 0;
  long long env_steps = 0;       ///< cumulative real steps, initial data included
  int episodes = 0;              ///< real episodes finished this epoch
  double mean_return = 0.0;      ///< undiscounted, this epoch's real episodes
  double mean_cost = 0.0;        ///< undiscounted episode cost
  double jc_estimate = 0.0;      ///< discounted cost return of the real episodes
  double cum_cost = 0.0;         ///< all real cost to date
  double alpha = 1.0;
  double dbar = 0.0;
  double d_m = 0.0;
  double d_H = 0.0;
  double mean_horizon = 0.0;
  long long max_horizon = 0;
  long long model_samples = 0;
  double model_holdout = 0.0;    ///< mean elite holdout loss of the last retrain
  double policy_kl = 0.0;
  std::string cpo_case;
  bool accepted = false;
  int backtracks = 0;
  double surr_improvement = 0.0;
  double cost_change = 0.0;
  std::optional<double> exact_return;  ///< tabular tasks only
  std::optional<double> exact_cost;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["env_steps"] = env_steps;
    j["episodes"] = episodes;
    j["mean_return"] = mean_return;
    j["mean_cost"] = mean_cost;
    j["jc_estimate"] = jc_estimate;
    j["cum_cost"] = cum_cost;
    j["alpha"] = alpha;
    j["dbar"] = dbar;
    j["d_m"] = d_m;
    j["d_H"] = d_H;
    j["mean_horizon"] = mean_horizon;
    j["max_horizon"] = max_horizon;
    j["model_samples"] = model_samples;
    j["model_holdout"] = model_holdout;
    j["policy_kl"] = policy_kl;
    j["cpo_case"] = cpo_case;
    j["accepted"] = accepted;
    j["backtracks"] = backtracks;
    j["surr_improvement"] = surr_improvement;
    j["cost_change"] = cost_change;
    if (exact_return) j["exact_return"] = *exact_return;
    if (exact_cost) j["exact_cost"] = *exact_cost;
    return j;
  }

  static EpochMetrics from_json(const nlohmann::json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int>();
    m.env_steps = j.at("env_steps").get<long long>();
    m.episodes = j.value("episodes", 0);
    m.mean_return = j.at("mean_return").get<double>();
    m.mean_cost = j.at("mean_cost").get<double>();
    m.jc_estimate = j.value("jc_estimate", 0.0);
    m.cum_cost = j.at("cum_cost").get<double>();
    m.alpha = j.value("alpha", 1.0);
    m.dbar = j.value("dbar", 0.0);
    m.d_m = j.value("d_m", 0.0);
    m.d_H = j.value("d_H", 0.0);
    m.mean_horizon = j.value("mean_horizon", 0.0);
    m.max_horizon = j.value("max_horizon", 0LL);
    m.model_samples = j.value("model_samples", 0LL);
    m.model_holdout = j.value("model_holdout", 0.0);
    m.policy_kl = j.value("policy_kl", 0.0);
    m.cpo_case = j.value("cpo_case", std::string());
    m.accepted = j.value("accepted", false);
    m.backtracks = j.value("backtracks", 0);
    m.surr_improvement = j.value("surr_improvement", 0.0);
    m.cost_change = j.value("cost_change", 0.0);
    if (j.contains("exact_return")) m.exact_return = j["exact_return"].get<double>();
    if (j.contains("exact_cost")) m.exact_cost = j["exact_cost"].get<double>();
    return m;
  }

  static const std::vector<std::string>& csv_columns() {
    static const std::vector<std::string> cols = {
        "epoch",        "env_steps",   "episodes",   "mean_return",   "mean_cost",        "jc_estimate",
        "cum_cost",     "alpha",       "dbar",       "d_m",           "d_H",              "mean_horizon",
        "max_horizon",  "model_samples", "model_holdout", "policy_kl", "cpo_case",        "accepted",
        "backtracks",   "surr_improvement", "cost_change", "exact_return", "exact_cost"};
    return cols;
  }

  std::string csv_row() const {
    const auto j = to_json();
    std::string row;
    for (std::size_t i = 0; i < csv_columns().size(); ++i) {
      if (i) row += ',';
      const auto it = j.find(csv_columns()[i]);
      if (it == j.end()) continue;
      row += it->is_string() ? it->get<std::string>() : it->dump();
    }
    return row;
  }
};

/// Appends each epoch to metrics.jsonl and metrics.csv. Both files exist,
/// header included, as soon as the writer is constructed.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& dir)
      : jsonl_(dir + "/metrics.jsonl", std::ios::trunc), csv_(dir + "/metrics.csv", std::ios::trunc) {
    if (!jsonl_ || !csv_) throw InvalidArgument("cannot create metrics files in " + dir);
    const auto& cols = EpochMetrics::csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) csv_ << (i ? "," : "") << cols[i];
    csv_ << "\n";
    csv_.flush();
  }

  void write(const EpochMetrics& m) {
    jsonl_ << m.to_json().dump() << "\n";
    csv_ << m.csv_row() << "\n";
    jsonl_.flush();
    csv_.flush();
  }

 private:
  std::ofstream jsonl_, csv_;
};

/// Reads metrics.jsonl; throws DataError on a missing file or a bad line.
inline std::vector<EpochMetrics> read_metrics(const std::string& run_dir) {
  const std::string path = run_dir + "/metrics.jsonl";
  std::ifstream in(path);
  if (!in) throw DataError("missing metrics file " + path);
  std::vector<EpochMetrics> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(EpochMetrics::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": corrupt record (" + e.what() + ")");
    }
  }
  return out;
}

}  // namespace cmbpo

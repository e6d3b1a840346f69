#pragma once

// Flat "key = value" experiment configuration. Lines starting with '#' are
// comments. Any key can be overridden from the environment as CMBPO_<KEY>
// (upper case), e.g. CMBPO_TARGET_KL=0.02.

#include "cmbpo/cpo.hpp"
#include "cmbpo/dynamics_model.hpp"
#include "cmbpo/environments.hpp"
#include "cmbpo/uncertainty.hpp"
#include "cmbpo/value_function.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace cmbpo {

inline constexpr const char* kEnvPrefix = "CMBPO_";

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Parses key = value lines; duplicate keys keep the last value.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& origin = "config") {
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw InvalidArgument(origin + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return static_cast<int>(x);
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument("config key '" + key + "': expected true/false, got '" + v + "'");
}

/// "64,64" -> {64, 64}; an empty string gives no hidden layers.
inline std::vector<Index> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const int x = parse_int(key, item);
    if (x < 1) throw InvalidArgument("config key '" + key + "': layer sizes must be positive");
    out.push_back(x);
  }
  return out;
}

/// "0:2,1:2" -> {(0,2), (1,2)}
inline std::vector<std::pair<int, int>> parse_cells(const std::string& key, const std::string& v) {
  std::vector<std::pair<int, int>> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InvalidArgument("config key '" + key + "': expected row:col, got '" + item + "'");
    out.emplace_back(parse_int(key, trim(item.substr(0, colon))), parse_int(key, trim(item.substr(colon + 1))));
  }
  return out;
}

inline std::string join_sizes(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string join_cells(const std::vector<std::pair<int, int>>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i)
    s += (i ? "," : "") + std::to_string(v[i].first) + ":" + std::to_string(v[i].second);
  return s;
}

inline std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

enum class CostMode { Discounted, Undiscounted };

struct ExperimentConfig {
  std::string env = "gridworld";
  std::string algo = "cmbpo";
  std::uint64_t seed = 0;
  int epochs = 200;
  int steps_per_epoch = 1000;
  int init_steps = 2000;
  int model_train_every = 1;
  int policy_updates = 1;  ///< model-based updates per epoch, each with fresh rollouts
  int checkpoint_every = 10;
  int buffer_capacity = 200000;

  GridworldSpec grid;
  PointCircleSpec circle;
  double cost_limit = 0.2;
  double cost_margin = 0.0;  ///< the optimiser aims at cost_limit - cost_margin; reporting uses cost_limit
  CostMode cost_mode = CostMode::Discounted;

  EnsembleConfig ensemble{7, 5, {200, 200, 200, 200}, Activation::Swish, 1e-3, 2048, 0.1, 5, 100, 0, 0, true, true, 1};

  double alpha0 = 0.5;
  int h0 = 5;
  double beta = 2.0;
  double alpha_floor = 0.05;
  int max_horizon = 100;
  int calib_rollouts = 200;
  bool calib_single = false;
  int model_rollouts = 1000;
  int probe_samples = 500;

  int policy_batch = 4000;
  std::vector<Index> policy_hidden{64, 64};
  double init_log_std = -0.5;
  CpoConfig cpo;

  std::vector<Index> value_hidden{64, 64};
  ValueFitConfig value_fit{80, 256, 3e-4};
  bool prefit_values = false;  ///< fit both critics on the initial model data before the first update

  /// Every recognised key with its setter and current value.
  struct Key {
    std::string name;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
  };

  static const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
      std::vector<Key> k;
      auto num = [&k](const std::string& name, auto member) {
        k.push_back({name,
                     [member, name](ExperimentConfig& c, const std::string& v) {
                       using T = std::remove_reference_t<decltype(member(c))>;
                       if constexpr (std::is_same_v<T, double>) member(c) = parse_double(name, v);
                       else if constexpr (std::is_same_v<T, bool>) member(c) = parse_bool(name, v);
                       else if constexpr (std::is_same_v<T, std::uint64_t>)
                         member(c) = static_cast<std::uint64_t>(parse_int(name, v));
                       else member(c) = parse_int(name, v);
                     },
                     [member](const ExperimentConfig& c) {
                       auto& x = member(const_cast<ExperimentConfig&>(c));
                       using T = std::remove_reference_t<decltype(x)>;
                       if constexpr (std::is_same_v<T, double>) return format_double(x);
                       else if constexpr (std::is_same_v<T, bool>) return std::string(x ? "true" : "false");
                       else return std::to_string(x);
                     }});
      };
#define CMBPO_KEY(name, expr) num(name, [](ExperimentConfig& c) -> auto& { return expr; })
      k.push_back({"env", [](ExperimentConfig& c, const std::string& v) { c.env = v; },
                   [](const ExperimentConfig& c) { return c.env; }});
      k.push_back({"algo", [](ExperimentConfig& c, const std::string& v) { c.algo = v; },
                   [](const ExperimentConfig& c) { return c.algo; }});
      CMBPO_KEY("seed", c.seed);
      CMBPO_KEY("epochs", c.epochs);
      CMBPO_KEY("steps_per_epoch", c.steps_per_epoch);
      CMBPO_KEY("init_steps", c.init_steps);
      CMBPO_KEY("model_train_every", c.model_train_every);
      CMBPO_KEY("policy_updates", c.policy_updates);
      CMBPO_KEY("checkpoint_every", c.checkpoint_every);
      CMBPO_KEY("buffer_capacity", c.buffer_capacity);
      CMBPO_KEY("grid_size", c.grid.size);
      k.push_back({"grid_hazards", [](ExperimentConfig& c, const std::string& v) { c.grid.hazards = parse_cells("grid_hazards", v); },
                   [](const ExperimentConfig& c) { return join_cells(c.grid.hazards); }});
      k.push_back({"grid_start",
                   [](ExperimentConfig& c, const std::string& v) {
                     const auto cells = parse_cells("grid_start", v);
                     require(cells.size() == 1, "config key 'grid_start': expected one row:col");
                     c.grid.start = cells.front();
                   },
                   [](const ExperimentConfig& c) { return join_cells({c.grid.start}); }});
      CMBPO_KEY("grid_slip", c.grid.slip);
      CMBPO_KEY("grid_gamma", c.grid.gamma);
      CMBPO_KEY("grid_horizon", c.grid.horizon);
      CMBPO_KEY("circle_radius", c.circle.radius);
      CMBPO_KEY("circle_half_width", c.circle.half_width);
      CMBPO_KEY("circle_dt", c.circle.dt);
      CMBPO_KEY("circle_horizon", c.circle.horizon);
      CMBPO_KEY("circle_control_cost", c.circle.control_cost);
      CMBPO_KEY("circle_init_noise", c.circle.init_noise);
      CMBPO_KEY("cost_limit", c.cost_limit);
      CMBPO_KEY("cost_margin", c.cost_margin);
      k.push_back({"cost_mode",
                   [](ExperimentConfig& c, const std::string& v) {
                     if (v == "discounted") c.cost_mode = CostMode::Discounted;
                     else if (v == "undiscounted") c.cost_mode = CostMode::Undiscounted;
                     else throw InvalidArgument("config key 'cost_mode': expected discounted or undiscounted");
                   },
                   [](const ExperimentConfig& c) {
                     return std::string(c.cost_mode == CostMode::Discounted ? "discounted" : "undiscounted");
                   }});
      CMBPO_KEY("ensemble_size", c.ensemble.members);
      CMBPO_KEY("ensemble_elites", c.ensemble.elites);
      k.push_back({"model_hidden", [](ExperimentConfig& c, const std::string& v) { c.ensemble.hidden = parse_sizes("model_hidden", v); },
                   [](const ExperimentConfig& c) { return join_sizes(c.ensemble.hidden); }});
      k.push_back({"model_activation",
                   [](ExperimentConfig& c, const std::string& v) { c.ensemble.activation = parse_activation(v); },
                   [](const ExperimentConfig& c) { return activation_name(c.ensemble.activation); }});
      CMBPO_KEY("model_lr", c.ensemble.learn_rate);
      CMBPO_KEY("model_adam_beta2", c.ensemble.adam_beta2);
      CMBPO_KEY("model_min_variance", c.ensemble.min_variance);
      CMBPO_KEY("model_batch", c.ensemble.batch_size);
      CMBPO_KEY("model_holdout", c.ensemble.holdout_fraction);
      CMBPO_KEY("model_patience", c.ensemble.patience);
      CMBPO_KEY("model_max_epochs", c.ensemble.max_epochs);
      CMBPO_KEY("model_batches_per_epoch", c.ensemble.max_batches_per_epoch);
      CMBPO_KEY("model_min_transitions", c.ensemble.min_transitions);
      CMBPO_KEY("model_warm_start", c.ensemble.warm_start);
      CMBPO_KEY("disagreement_all_members", c.ensemble.disagreement_all_members);
      CMBPO_KEY("threads", c.ensemble.threads);
      CMBPO_KEY("alpha0", c.alpha0);
      CMBPO_KEY("h0", c.h0);
      CMBPO_KEY("beta", c.beta);
      CMBPO_KEY("alpha_floor", c.alpha_floor);
      CMBPO_KEY("max_horizon", c.max_horizon);
      CMBPO_KEY("calib_rollouts", c.calib_rollouts);
      CMBPO_KEY("calib_single_rollout", c.calib_single);
      CMBPO_KEY("model_rollouts", c.model_rollouts);
      CMBPO_KEY("probe_samples", c.probe_samples);
      CMBPO_KEY("policy_batch", c.policy_batch);
      k.push_back({"policy_hidden", [](ExperimentConfig& c, const std::string& v) { c.policy_hidden = parse_sizes("policy_hidden", v); },
                   [](const ExperimentConfig& c) { return join_sizes(c.policy_hidden); }});
      CMBPO_KEY("init_log_std", c.init_log_std);
      CMBPO_KEY("target_kl", c.cpo.target_kl);
      CMBPO_KEY("cg_iters", c.cpo.cg_iters);
      CMBPO_KEY("cg_damping", c.cpo.cg_damping);
      CMBPO_KEY("backtrack_steps", c.cpo.backtrack_steps);
      CMBPO_KEY("backtrack_coeff", c.cpo.backtrack_coeff);
      CMBPO_KEY("gamma", c.cpo.gamma);
      CMBPO_KEY("gamma_c", c.cpo.gamma_c);
      CMBPO_KEY("lambda", c.cpo.lambda);
      CMBPO_KEY("lambda_c", c.cpo.lambda_c);
      k.push_back({"value_hidden", [](ExperimentConfig& c, const std::string& v) { c.value_hidden = parse_sizes("value_hidden", v); },
                   [](const ExperimentConfig& c) { return join_sizes(c.value_hidden); }});
      CMBPO_KEY("value_lr", c.value_fit.learn_rate);
      CMBPO_KEY("value_repeats", c.value_fit.repeats);
      CMBPO_KEY("value_minibatch", c.value_fit.minibatch);
      CMBPO_KEY("value_normalize", c.value_fit.normalize_targets);
      CMBPO_KEY("value_prefit", c.prefit_values);
#undef CMBPO_KEY
      return k;
    }();
    return table;
  }

  void set(const std::string& key, const std::string& value) {
    for (const auto& k : keys())
      if (k.name == key) {
        k.set(*this, value);
        return;
      }
    throw InvalidArgument("unknown config key '" + key + "'");
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> out;
    for (const auto& k : keys()) out[k.name] = k.get(*this);
    return out;
  }

  /// Dimension-dependent defaults for the chosen environment, before file values.
  static ExperimentConfig defaults_for(const std::string& env) {
    ExperimentConfig c;
    c.env = env;
    if (env == "point_circle") {
      c.steps_per_epoch = 4000;
      c.cost_limit = 10.0;
      c.cost_mode = CostMode::Undiscounted;
    } else if (env == "gridworld") {
      c.steps_per_epoch = 1000;
      c.cost_limit = 0.2;
      c.cost_mode = CostMode::Discounted;
      c.cpo.gamma = c.cpo.gamma_c = 0.9;
    } else {
      throw InvalidArgument("unknown env '" + env + "' (expected gridworld or point_circle)");
    }
    return c;
  }

  void validate() const {
    require(env == "gridworld" || env == "point_circle", "config: env must be gridworld or point_circle");
    require(algo == "cmbpo" || algo == "cpo", "config: algo must be cmbpo or cpo");
    require(epochs >= 0, "config: epochs must be >= 0");
    require(steps_per_epoch >= 1 && init_steps >= 0 && model_train_every >= 1 && policy_updates >= 1 &&
                checkpoint_every >= 1,
            "config: counts must be positive");
    require(buffer_capacity >= 1 && model_rollouts >= 1 && probe_samples >= 1 && policy_batch >= 1,
            "config: counts must be positive");
    require(h0 >= 1 && max_horizon >= 1 && calib_rollouts >= 1, "config: horizons must be positive");
    require(alpha0 >= 0.0 && alpha0 < 1.0, "config: alpha0 must lie in [0, 1)");
    require(alpha_floor >= 0.0 && alpha_floor <= 1.0, "config: alpha_floor must lie in [0, 1]");
    require(beta >= 0.0, "config: beta must be >= 0");
    require(cost_limit >= 0.0, "config: cost_limit must be >= 0");
    require(cost_margin >= 0.0 && cost_margin <= cost_limit, "config: cost_margin must lie in [0, cost_limit]");
    require(ensemble.min_variance >= 0.0, "config: model_min_variance must be >= 0");
    require(ensemble.members >= 2, "config: ensemble_size must be >= 2 for disagreement");
    require(ensemble.elites >= 1 && ensemble.elites <= ensemble.members, "config: need 1 <= ensemble_elites <= ensemble_size");
    cpo.validate();
    grid.validate();
    circle.validate();
  }
};

/// File values, then CMBPO_<KEY> environment overrides. The env key is read
/// first so its defaults apply underneath everything else.
inline ExperimentConfig load_config(const std::map<std::string, std::string>& file_values) {
  auto lookup_env = [](const std::string& key) -> const char* {
    std::string name = kEnvPrefix;
    for (char ch : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return std::getenv(name.c_str());
  };
  std::string env = "gridworld";
  if (auto it = file_values.find("env"); it != file_values.end()) env = it->second;
  if (const char* v = lookup_env("env")) env = v;
  ExperimentConfig cfg = ExperimentConfig::defaults_for(env);
  for (const auto& [k, v] : file_values) cfg.set(k, v);
  for (const auto& key : ExperimentConfig::keys())
    if (const char* v = lookup_env(key.name)) cfg.set(key.name, v);
  cfg.grid.cost_limit = cfg.cost_limit;
  cfg.circle.cost_limit = cfg.cost_limit;
  cfg.cpo.cost_limit = cfg.cost_limit;
  return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file " + path);
  return load_config(parse_key_values(in, path));
}

inline void write_config(std::ostream& out, const ExperimentConfig& cfg) {
  for (const auto& [k, v] : cfg.to_map()) out << k << " = " << v << "\n";
}

}  // namespace cmbpo

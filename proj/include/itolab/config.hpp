#pragma once

// Experiment configuration: JSON in, validated ExperimentConfig out. Every
// violation is collected before reporting.

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "itolab/convex_core.hpp"
#include "itolab/errors.hpp"
#include "itolab/path_sim.hpp"

namespace itolab {

enum class Experiment {
  tanaka_baseline,
  pl_decomposition,
  smoothing,
  epsilon_limit,
  conditions,
  mollified_selection,
  directional_limit
};

inline constexpr std::array<std::string_view, 7> kExperimentNames{
    "tanaka_baseline", "pl_decomposition", "smoothing",        "epsilon_limit",
    "conditions",      "mollified_selection", "directional_limit"};

inline std::string to_string(Experiment e) { return std::string(kExperimentNames[static_cast<std::size_t>(e)]); }

inline std::optional<Experiment> experiment_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kExperimentNames.size(); ++i)
    if (kExperimentNames[i] == name) return static_cast<Experiment>(i);
  return std::nullopt;
}

/// Monte Carlo experiments refuse to run on fewer paths than this.
inline constexpr std::size_t kMinStatisticalPaths = 100;

/// Either an explicit max-of-affine function or a named oracle.
struct FunctionSpec {
  std::string name = "abs";  ///< abs, positive_part, affine, quadratic, pl, random_pl
  std::optional<PLConvex> pl;
  double alpha = 0.0;
  Vector beta;
  double curvature = 1.0;
  int dim = 1;
  std::size_t pieces = 4;  ///< random_pl only
};

struct Tolerances {
  double identity = 1e-12;
  double flatness_margin = 0.0;  ///< 0 means the calibrated default
  double z_max = 4.0;
  double lag1_max = 0.1;
  double curve_slack = 2.0;      ///< stderr multiples allowed upward between curve points
  double smoothing_ratio = 0.2;  ///< final <= ratio * first
  double epsilon_final = 0.05;
  double condition_spread = 2.0;
  double subgradient = 1e-6;
  double tanaka_sigmas = 3.0;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::tanaka_baseline;
  std::uint64_t seed = 1;
  std::size_t n_paths = 1000;
  std::size_t n_steps = 4096;
  double horizon = 1.0;
  FunctionSpec function;
  ProcessRecipe process;
  std::string selection = "min_index_pl";
  std::vector<double> eps_schedule{0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625};
  std::vector<int> n_levels{1, 2, 4, 8, 16, 32, 64};
  std::vector<double> theta_schedule = geometric_schedule(1e-4);
  std::vector<double> lambda_schedule = geometric_schedule(1.0);
  double r = 4.0;
  double r_prime = 5.0;
  double epsilon = 0.25;
  std::size_t n_functions = 20;
  std::size_t n_points = 1000;
  int samples = 256;
  Tolerances tolerances;
  std::string out_dir = "out";
  unsigned workers = 0;  ///< 0 means one per hardware thread; never changes results
};

namespace detail {

inline const std::set<std::string>& top_level_keys() {
  static const std::set<std::string> keys{
      "experiment", "seed",         "n_paths",   "n_steps",        "horizon",         "function",
      "process",    "selection",    "eps_schedule", "n_levels",    "theta_schedule",  "lambda_schedule",
      "r",          "r_prime",      "epsilon",   "n_functions",    "n_points",        "samples",
      "tolerances", "out_dir",      "workers"};
  return keys;
}

class Collector {
 public:
  void add(std::string msg) { problems_.push_back(std::move(msg)); }
  bool empty() const { return problems_.empty(); }
  const std::vector<std::string>& problems() const { return problems_; }

  /// Reads j[key] into out when present; records a type error otherwise.
  template <class T>
  void read(const nlohmann::json& j, const char* key, T& out, std::string_view where = {}) {
    if (!j.contains(key)) return;
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      add(std::string(where) + key + ": wrong type (" + j.at(key).dump() + ")");
    }
  }

 private:
  std::vector<std::string> problems_;
};

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, std::string_view where,
                       Collector& c) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) c.add("unknown key '" + std::string(where) + key + "'");
}

inline Vector read_vector(const nlohmann::json& j, const char* key, Collector& c, std::string_view where) {
  std::vector<double> v;
  c.read(j, key, v, where);
  Vector out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[i];
  return out;
}

inline FunctionSpec parse_function(const nlohmann::json& j, Collector& c) {
  FunctionSpec f;
  if (j.is_string()) {
    f.name = j.get<std::string>();
  } else if (j.is_object() && j.contains("pieces") && j.at("pieces").is_array()) {
    f.name = "pl";
    check_keys(j, {"dim", "pieces"}, "function.", c);
    try {
      f.pl = pl_from_json(j);
      f.dim = f.pl->dim();
    } catch (const std::exception& e) {
      c.add(std::string("function: ") + e.what());
    }
    return f;
  } else if (j.is_object()) {
    check_keys(j, {"name", "dim", "alpha", "beta", "curvature", "pieces"}, "function.", c);
    c.read(j, "name", f.name, "function.");
    c.read(j, "dim", f.dim, "function.");
    c.read(j, "alpha", f.alpha, "function.");
    c.read(j, "curvature", f.curvature, "function.");
    c.read(j, "pieces", f.pieces, "function.");
    f.beta = read_vector(j, "beta", c, "function.");
  } else {
    c.add("function: expected a name or an object");
    return f;
  }
  static const std::set<std::string> names{"abs", "positive_part", "affine", "quadratic", "random_pl"};
  if (!names.count(f.name)) {
    c.add("function.name: unknown function '" + f.name + "' (allowed: abs, positive_part, affine, quadratic, "
          "random_pl, or an object with pieces)");
    return f;
  }
  if (f.name == "abs" || f.name == "positive_part") {
    if (f.dim != 1) c.add("function.dim: " + f.name + " is one-dimensional");
  }
  if (f.name == "affine") {
    if (f.beta.size() == 0) f.beta = Vector::Ones(f.dim);
    f.dim = static_cast<int>(f.beta.size());
  }
  if (f.dim < 1) c.add("function.dim: must be >= 1");
  if (f.name == "quadratic" && !(f.curvature > 0.0)) c.add("function.curvature: must be positive");
  if (f.name == "random_pl" && f.pieces < 1) c.add("function.pieces: must be >= 1");
  return f;
}

inline ProcessRecipe parse_process(const nlohmann::json& j, Collector& c) {
  ProcessRecipe p;
  if (!j.is_object()) {
    c.add("process: expected an object");
    return p;
  }
  check_keys(j, {"dim", "x0", "martingale", "scale", "drift", "drift_rate", "frozen"}, "process.", c);
  c.read(j, "dim", p.dim, "process.");
  p.x0 = read_vector(j, "x0", c, "process.");
  std::string mart = "bm", drift = "zero";
  c.read(j, "martingale", mart, "process.");
  c.read(j, "drift", drift, "process.");
  if (mart == "bm" || mart == "brownian") p.martingale = ProcessRecipe::Martingale::brownian;
  else if (mart == "zero") p.martingale = ProcessRecipe::Martingale::zero;
  else if (mart == "sigma_sine") p.martingale = ProcessRecipe::Martingale::sigma_sine;
  else c.add("process.martingale: unknown '" + mart + "' (allowed: bm, zero, sigma_sine)");
  if (drift == "zero") p.drift = ProcessRecipe::Drift::zero;
  else if (drift == "linear") p.drift = ProcessRecipe::Drift::linear;
  else c.add("process.drift: unknown '" + drift + "' (allowed: zero, linear)");
  c.read(j, "scale", p.scale, "process.");
  p.drift_rate = read_vector(j, "drift_rate", c, "process.");
  c.read(j, "frozen", p.frozen, "process.");
  if (p.dim < 1) c.add("process.dim: must be >= 1");
  if (p.x0.size() != 0 && p.x0.size() != p.dim) c.add("process.x0: length must equal process.dim");
  if (p.drift_rate.size() != 0 && p.drift_rate.size() != p.dim)
    c.add("process.drift_rate: length must equal process.dim");
  if (!(p.scale > 0.0) && p.martingale != ProcessRecipe::Martingale::zero) c.add("process.scale: must be positive");
  for (const auto& [lo, hi] : p.frozen)
    if (!(lo < hi)) c.add("process.frozen: each window needs lo < hi");
  return p;
}

inline Tolerances parse_tolerances(const nlohmann::json& j, Collector& c) {
  Tolerances t;
  if (!j.is_object()) {
    c.add("tolerances: expected an object");
    return t;
  }
  check_keys(j,
             {"identity", "flatness_margin", "z_max", "lag1_max", "curve_slack", "smoothing_ratio", "epsilon_final",
              "condition_spread", "subgradient", "tanaka_sigmas"},
             "tolerances.", c);
  c.read(j, "identity", t.identity, "tolerances.");
  c.read(j, "flatness_margin", t.flatness_margin, "tolerances.");
  c.read(j, "z_max", t.z_max, "tolerances.");
  c.read(j, "lag1_max", t.lag1_max, "tolerances.");
  c.read(j, "curve_slack", t.curve_slack, "tolerances.");
  c.read(j, "smoothing_ratio", t.smoothing_ratio, "tolerances.");
  c.read(j, "epsilon_final", t.epsilon_final, "tolerances.");
  c.read(j, "condition_spread", t.condition_spread, "tolerances.");
  c.read(j, "subgradient", t.subgradient, "tolerances.");
  c.read(j, "tanaka_sigmas", t.tanaka_sigmas, "tolerances.");
  return t;
}

template <class T>
bool strictly_decreasing(const std::vector<T>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (!(v[i] < v[i - 1])) return false;
  return true;
}

}  // namespace detail

/// Parses and validates a JSON object. Throws ConfigError listing every
/// problem found.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::Collector c;
  ExperimentConfig cfg;
  if (!j.is_object()) throw ConfigError({"config: expected a JSON object"});
  detail::check_keys(j, detail::top_level_keys(), "", c);

  if (!j.contains("experiment")) {
    c.add("experiment: missing");
  } else if (!j.at("experiment").is_string()) {
    c.add("experiment: expected a string");
  } else {
    const auto name = j.at("experiment").get<std::string>();
    if (auto e = experiment_from_string(name)) {
      cfg.experiment = *e;
    } else {
      std::string allowed;
      for (auto n : kExperimentNames) allowed += (allowed.empty() ? "" : ", ") + std::string(n);
      c.add("experiment: unknown '" + name + "' (allowed: " + allowed + ")");
    }
  }

  c.read(j, "seed", cfg.seed);
  c.read(j, "n_paths", cfg.n_paths);
  c.read(j, "n_steps", cfg.n_steps);
  c.read(j, "horizon", cfg.horizon);
  if (j.contains("function")) cfg.function = detail::parse_function(j.at("function"), c);
  const bool process_given = j.contains("process");
  if (process_given) cfg.process = detail::parse_process(j.at("process"), c);
  else cfg.process.dim = cfg.function.dim;
  c.read(j, "selection", cfg.selection);
  c.read(j, "eps_schedule", cfg.eps_schedule);
  c.read(j, "n_levels", cfg.n_levels);
  c.read(j, "theta_schedule", cfg.theta_schedule);
  c.read(j, "lambda_schedule", cfg.lambda_schedule);
  c.read(j, "r", cfg.r);
  c.read(j, "r_prime", cfg.r_prime);
  c.read(j, "epsilon", cfg.epsilon);
  c.read(j, "n_functions", cfg.n_functions);
  c.read(j, "n_points", cfg.n_points);
  c.read(j, "samples", cfg.samples);
  if (j.contains("tolerances")) cfg.tolerances = detail::parse_tolerances(j.at("tolerances"), c);
  c.read(j, "out_dir", cfg.out_dir);
  c.read(j, "workers", cfg.workers);

  if (j.contains("n_paths") && j.at("n_paths").is_number_integer() && j.at("n_paths").get<long long>() < 1)
    c.add("n_paths: must be >= 1");
  if (cfg.n_paths < 1) c.add("n_paths: must be >= 1");
  if (cfg.n_steps < 2) c.add("n_steps: must be >= 2");
  if (!(cfg.horizon > 0.0)) c.add("horizon: must be positive");
  if (!(cfg.r > 0.0)) c.add("r: must be positive");
  if (!(cfg.r_prime > cfg.r)) c.add("r_prime, r: need r_prime > r (got r_prime=" + std::to_string(cfg.r_prime) +
                                    ", r=" + std::to_string(cfg.r) + ")");
  if (!(cfg.epsilon >= 0.0)) c.add("epsilon: must be >= 0");
  if (cfg.eps_schedule.empty() || !detail::strictly_decreasing(cfg.eps_schedule) || cfg.eps_schedule.back() <= 0.0)
    c.add("eps_schedule: must be positive and strictly decreasing");
  if (cfg.theta_schedule.empty() || !detail::strictly_decreasing(cfg.theta_schedule) ||
      cfg.theta_schedule.back() <= 0.0)
    c.add("theta_schedule: must be positive and strictly decreasing");
  if (cfg.lambda_schedule.empty() || !detail::strictly_decreasing(cfg.lambda_schedule) ||
      cfg.lambda_schedule.back() <= 0.0)
    c.add("lambda_schedule: must be positive and strictly decreasing");
  bool levels_ok = !cfg.n_levels.empty() && cfg.n_levels.front() >= 1;
  for (std::size_t i = 1; i < cfg.n_levels.size(); ++i) levels_ok = levels_ok && cfg.n_levels[i] > cfg.n_levels[i - 1];
  if (!levels_ok) c.add("n_levels: must be positive and strictly increasing");
  if (cfg.samples < 1) c.add("samples: must be >= 1");
  if (cfg.n_functions < 1) c.add("n_functions: must be >= 1");
  if (cfg.n_points < 1) c.add("n_points: must be >= 1");
  static const std::set<std::string> selections{"min_index_pl", "mollified", "left_derivative_1d",
                                                "right_derivative_1d"};
  if (!selections.count(cfg.selection))
    c.add("selection: unknown '" + cfg.selection +
          "' (allowed: min_index_pl, mollified, left_derivative_1d, right_derivative_1d)");
  if (process_given && c.empty() && cfg.process.dim != cfg.function.dim)
    c.add("process.dim: must equal the function dimension (" + std::to_string(cfg.function.dim) + ")");

  if (!c.empty()) throw ConfigError(c.problems());
  return cfg;
}

inline ExperimentConfig parse_config_text(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  return parse_config(j);
}

/// Canonical echo of every setting that can change results. out_dir and
/// workers are left out: they never affect the numbers.
inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  nlohmann::json fn;
  if (cfg.function.pl) {
    fn = to_json(*cfg.function.pl);
  } else {
    fn = {{"name", cfg.function.name}, {"dim", cfg.function.dim}};
    if (cfg.function.name == "affine") {
      fn["alpha"] = cfg.function.alpha;
      fn["beta"] = std::vector<double>(cfg.function.beta.begin(), cfg.function.beta.end());
    }
    if (cfg.function.name == "quadratic") fn["curvature"] = cfg.function.curvature;
    if (cfg.function.name == "random_pl") fn["pieces"] = cfg.function.pieces;
  }
  const auto& p = cfg.process;
  const Vector x0 = p.start();
  nlohmann::json proc{{"dim", p.dim},
                      {"x0", std::vector<double>(x0.begin(), x0.end())},
                      {"martingale", to_string(p.martingale)},
                      {"scale", p.scale},
                      {"drift", to_string(p.drift)},
                      {"drift_rate", std::vector<double>(p.drift_rate.begin(), p.drift_rate.end())},
                      {"frozen", p.frozen}};
  const auto& t = cfg.tolerances;
  nlohmann::json tol{{"identity", t.identity},
                     {"flatness_margin", t.flatness_margin},
                     {"z_max", t.z_max},
                     {"lag1_max", t.lag1_max},
                     {"curve_slack", t.curve_slack},
                     {"smoothing_ratio", t.smoothing_ratio},
                     {"epsilon_final", t.epsilon_final},
                     {"condition_spread", t.condition_spread},
                     {"subgradient", t.subgradient},
                     {"tanaka_sigmas", t.tanaka_sigmas}};
  return {{"experiment", to_string(cfg.experiment)},
          {"seed", cfg.seed},
          {"n_paths", cfg.n_paths},
          {"n_steps", cfg.n_steps},
          {"horizon", cfg.horizon},
          {"function", fn},
          {"process", proc},
          {"selection", cfg.selection},
          {"eps_schedule", cfg.eps_schedule},
          {"n_levels", cfg.n_levels},
          {"theta_schedule", cfg.theta_schedule},
          {"lambda_schedule", cfg.lambda_schedule},
          {"r", cfg.r},
          {"r_prime", cfg.r_prime},
          {"epsilon", cfg.epsilon},
          {"n_functions", cfg.n_functions},
          {"n_points", cfg.n_points},
          {"samples", cfg.samples},
          {"tolerances", tol}};
}

}  // namespace itolab

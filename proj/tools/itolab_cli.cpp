// itolab: run one named experiment and write its artifacts.
//
//   itolab <experiment> [--config FILE] [--seed N] [--out DIR] [--paths N] [--steps N]
//
// Flags override the config file, which overrides built-in defaults.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "itolab/itolab.hpp"

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw itolab::IoError("cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semimartingale decomposition experiments for convex functions"};
  std::string experiment;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> paths, steps;
  std::optional<unsigned> workers;

  std::string names;
  for (auto n : itolab::kExperimentNames) names += (names.empty() ? "" : ", ") + std::string(n);
  app.add_option("experiment", experiment, "one of: " + names)->required();
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--paths", paths, "number of Monte Carlo paths");
  app.add_option("--steps", steps, "number of time steps");
  app.add_option("--workers", workers, "worker threads (results do not depend on it)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : itolab::exit_config_error;
  }

  try {
    nlohmann::json j = nlohmann::json::object();
    if (!config_path.empty()) {
      try {
        j = nlohmann::json::parse(read_text(config_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw itolab::ConfigError({"config is not valid JSON: " + std::string(e.what())});
      }
      if (!j.is_object()) throw itolab::ConfigError({"config: expected a JSON object"});
    }
    j["experiment"] = experiment;
    if (seed) j["seed"] = *seed;
    if (out_dir) j["out_dir"] = *out_dir;
    if (paths) j["n_paths"] = *paths;
    if (steps) j["n_steps"] = *steps;
    if (workers) j["workers"] = *workers;

    const auto cfg = itolab::parse_config(j);
    const auto manifest = itolab::run(cfg);
    std::cout << itolab::to_string(cfg.experiment) << ": " << (manifest.verdict ? "pass" : "fail") << " ("
              << cfg.out_dir << ")\n";
    return manifest.exit_code;
  } catch (const itolab::ConfigError& e) {
    std::cerr << "config error:\n";
    for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
    return itolab::exit_config_error;
  } catch (const itolab::InsufficientData& e) {
    std::cerr << "insufficient data: " << e.what() << '\n';
    return itolab::exit_config_error;
  } catch (const itolab::InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return itolab::exit_config_error;
  } catch (const itolab::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return itolab::exit_io_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

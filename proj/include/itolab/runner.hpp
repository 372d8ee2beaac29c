#pragma once

// Experiment dispatch and artifacts: every run writes its CSVs and
// report.json into out_dir, then a manifest.json with SHA-256 digests.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "itolab/config.hpp"
#include "itolab/convex_core.hpp"
#include "itolab/decomposition_lab.hpp"
#include "itolab/errors.hpp"
#include "itolab/ito_engine.hpp"
#include "itolab/parallel.hpp"
#include "itolab/path_sim.hpp"
#include "itolab/stats.hpp"

namespace itolab {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { exit_pass = 0, exit_verdict_failure = 2, exit_config_error = 3, exit_io_error = 4 };

inline std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256: digest computation failed");
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

inline std::string config_digest(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

struct FileDigest {
  std::string name;
  std::string sha256;
  std::size_t bytes = 0;
};

struct RunManifest {
  nlohmann::json config;
  std::string config_digest;
  std::string tool_version = kToolVersion;
  double wall_seconds = 0.0;
  std::vector<FileDigest> files;
  bool verdict = false;
  int exit_code = exit_pass;
};

/// What an experiment hands back before anything touches the disk.
struct ExperimentOutput {
  bool verdict = false;
  nlohmann::json results;
  std::vector<std::pair<std::string, std::string>> csv_files;  ///< name, body (no header comment)
};

/// The function named in the config as an oracle. random_pl draws from the
/// sampling stream of the run seed.
inline ConvexOracle build_function(const ExperimentConfig& cfg) {
  const auto& f = cfg.function;
  if (f.pl) return ConvexOracle::from_pl(*f.pl, "pl");
  if (f.name == "abs") return ConvexOracle::abs();
  if (f.name == "positive_part") return ConvexOracle::positive_part();
  if (f.name == "affine") return ConvexOracle::affine(f.alpha, f.beta);
  if (f.name == "quadratic") return ConvexOracle::quadratic(f.curvature, f.dim);
  if (f.name == "random_pl") {
    Stream rng(cfg.seed, StreamTag::sampling, 0);
    return ConvexOracle::from_pl(random_pl(f.dim, f.pieces, rng), "random_pl");
  }
  throw InvalidInput("unknown function '" + f.name + "'");
}

inline SelectionKind selection_kind(const std::string& name) {
  if (name == "min_index_pl") return SelectionKind::min_index_pl;
  if (name == "mollified") return SelectionKind::mollified;
  if (name == "left_derivative_1d") return SelectionKind::left_derivative_1d;
  if (name == "right_derivative_1d") return SelectionKind::right_derivative_1d;
  throw InvalidInput("unknown selection '" + name + "'");
}

namespace detail {

inline void require_paths(const ExperimentConfig& cfg) {
  if (cfg.n_paths < kMinStatisticalPaths)
    throw InsufficientData(to_string(cfg.experiment) + ": need n_paths >= " + std::to_string(kMinStatisticalPaths) +
                           ", got " + std::to_string(cfg.n_paths));
}

inline std::ostringstream csv_stream() {
  std::ostringstream out;
  out.precision(17);
  return out;
}

inline std::string curve_csv(const ConvergenceCurve& c) {
  std::ostringstream out;
  write_curve_csv(out, c);
  return out.str();
}

inline nlohmann::json curve_json(const ConvergenceCurve& c) {
  return {{"params", c.params}, {"errors", c.errors}, {"stderrs", c.stderrs}};
}

inline nlohmann::json martingale_json(const MartingaleTestReport& r) {
  return {{"checkpoints", r.checkpoints}, {"increment_means", r.increment_means}, {"std_errors", r.std_errors},
          {"z", r.z},                     {"max_abs_z", r.max_abs_z},             {"lag1_corr", r.lag1_corr},
          {"n_paths", r.n_paths},         {"verdict", r.verdict}};
}

inline Ensemble make_ensemble(const ExperimentConfig& cfg) {
  return Ensemble(cfg.process, make_grid(cfg.horizon, cfg.n_steps), cfg.n_paths, cfg.seed);
}

inline ExperimentOutput run_tanaka_baseline(const ExperimentConfig& cfg) {
  require_paths(cfg);
  const auto& p = cfg.process;
  if (p.dim != 1) throw UnsupportedDimension("tanaka_baseline: only d = 1 is supported");
  if (p.martingale != ProcessRecipe::Martingale::brownian || p.drift != ProcessRecipe::Drift::zero || !p.frozen.empty())
    throw InvalidInput("tanaka_baseline: the oracle needs a driftless Brownian process without frozen windows");
  const Ensemble ens = make_ensemble(cfg);
  const double x0 = p.start()[0];
  const std::size_t n_out = std::min<std::size_t>(16, cfg.n_steps);

  struct PathOut {
    std::vector<double> sampled;
    double terminal, occupation, oracle;
  };
  const auto outs = parallel_map<PathOut>(
      cfg.n_paths,
      [&](std::size_t i) {
        const SemimartingalePath path = ens.path(i);
        const auto lt = local_time_tanaka(path, 0.0);
        PathOut o;
        for (std::size_t k = 1; k <= n_out; ++k) o.sampled.push_back(lt.values[k * cfg.n_steps / n_out]);
        o.terminal = lt.values.back();
        o.occupation = local_time_occupation(path, 0.0, default_bandwidth(path.grid()));
        Stream oracle(cfg.seed, StreamTag::oracle, i);
        const double end = x0 + p.scale * std::sqrt(cfg.horizon) * oracle.gaussian();
        o.oracle = std::abs(end) - std::abs(x0);
        return o;
      },
      cfg.workers);

  std::vector<double> terminal, occupation, oracle;
  for (const auto& o : outs) {
    terminal.push_back(o.terminal);
    occupation.push_back(o.occupation);
    oracle.push_back(o.oracle);
  }
  const double m = mean(terminal), se = standard_error(terminal);
  const double om = mean(oracle), ose = standard_error(oracle);
  const double combined = std::sqrt(se * se + ose * ose);
  const double z = combined > 0.0 ? (m - om) / combined : 0.0;

  ExperimentOutput out;
  out.verdict = std::abs(m - om) <= cfg.tolerances.tanaka_sigmas * combined;
  out.results = {{"local_time_mean", m},       {"local_time_stderr", se},
                 {"oracle_mean", om},          {"oracle_stderr", ose},
                 {"z", z},                     {"occupation_mean", mean(occupation)},
                 {"occupation_stderr", standard_error(occupation)}};
  auto csv = csv_stream();
  csv << "t,mean_local_time,stderr\n";
  for (std::size_t k = 0; k < n_out; ++k) {
    std::vector<double> col;
    for (const auto& o : outs) col.push_back(o.sampled[k]);
    csv << ens.grid()->time((k + 1) * cfg.n_steps / n_out) << ',' << mean(col) << ',' << standard_error(col) << '\n';
  }
  out.csv_files.emplace_back("local_time.csv", csv.str());
  return out;
}

inline ExperimentOutput run_pl_decomposition(const ExperimentConfig& cfg) {
  require_paths(cfg);
  const ConvexOracle f = build_function(cfg);
  const PLConvex* pl = f.pl();
  if (!pl) throw InvalidInput("pl_decomposition: the function must be piecewise linear");
  const Ensemble ens = make_ensemble(cfg);
  const double margin =
      cfg.tolerances.flatness_margin > 0.0 ? cfg.tolerances.flatness_margin : default_flatness_margin(*pl, *ens.grid());
  const auto checkpoints = default_checkpoints(cfg.horizon);

  struct PathOut {
    double identity, tanaka_gap;
    FlatnessReport flat;
    std::vector<double> at_checkpoints;
  };
  const auto outs = parallel_map<PathOut>(
      cfg.n_paths,
      [&](std::size_t i) {
        const SemimartingalePath path = ens.path(i);
        const DecompositionResult r = decompose_pl(*pl, path);
        PathOut o;
        o.identity = identity_error(r, f, path);
        o.tanaka_gap = pl->size() == 2 ? tanaka_identity_gap(*pl, path, r) : 0.0;
        o.flat = residual_flatness_check(r, *pl, path, margin);
        for (double t : checkpoints) o.at_checkpoints.push_back(r.n.values[path.grid().index_at(t)]);
        return o;
      },
      cfg.workers);

  double identity = 0.0, gap = 0.0, flat_inc = 0.0, decrease = 0.0;
  std::size_t flat_failures = 0, qualifying = 0;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(cfg.n_paths), static_cast<Eigen::Index>(checkpoints.size()));
  for (std::size_t i = 0; i < outs.size(); ++i) {
    identity = std::max(identity, outs[i].identity);
    gap = std::max(gap, outs[i].tanaka_gap);
    flat_inc = std::max(flat_inc, outs[i].flat.max_flat_increment);
    decrease = std::max(decrease, outs[i].flat.max_decrease);
    qualifying += outs[i].flat.qualifying_steps;
    if (!outs[i].flat.ok) ++flat_failures;
    for (std::size_t k = 0; k < checkpoints.size(); ++k)
      values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = outs[i].at_checkpoints[k];
  }
  const auto mt = martingale_test(values, checkpoints, {cfg.tolerances.z_max, cfg.tolerances.lag1_max});

  ExperimentOutput out;
  const bool identity_ok = identity <= cfg.tolerances.identity && gap <= cfg.tolerances.identity;
  out.verdict = identity_ok && flat_failures == 0 && mt.verdict;
  out.results = {{"pieces", pl->size()},
                 {"max_identity_error", identity},
                 {"max_tanaka_gap", gap},
                 {"flatness_margin", margin},
                 {"flatness_failures", flat_failures},
                 {"qualifying_steps", qualifying},
                 {"max_flat_increment", flat_inc},
                 {"max_decrease", decrease},
                 {"martingale", martingale_json(mt)}};

  const SemimartingalePath path0 = ens.path(0);
  const DecompositionResult r0 = decompose_pl(*pl, path0);
  auto csv = csv_stream();
  csv << 't';
  for (int c = 1; c <= path0.dim(); ++c) csv << ",x_" << c;
  csv << ",n,s\n";
  for (std::size_t j = 0; j < path0.size(); ++j) {
    csv << path0.grid().time(j);
    for (int c = 0; c < path0.dim(); ++c) csv << ',' << path0.x()(static_cast<Eigen::Index>(j), c);
    csv << ',' << r0.n.values[j] << ',' << r0.s[j] << '\n';
  }
  out.csv_files.emplace_back("decomposition_path0.csv", csv.str());
  std::ostringstream mcsv;
  write_martingale_report(mcsv, mt);
  out.csv_files.emplace_back("martingale.csv", mcsv.str());
  return out;
}

inline ExperimentOutput run_smoothing(const ExperimentConfig& cfg) {
  require_paths(cfg);
  const ConvexOracle f = build_function(cfg);
  const Selection sel = make_selection(selection_kind(cfg.selection), f, cfg.seed, cfg.samples);
  const auto curve = smoothing_convergence_experiment(f, make_ensemble(cfg), cfg.epsilon, cfg.n_levels, cfg.r, sel,
                                                      cfg.workers, cfg.seed);
  ExperimentOutput out;
  const bool decreasing = curve.decreasing(cfg.tolerances.curve_slack);
  const bool shrinks = curve.errors.back() <= cfg.tolerances.smoothing_ratio * curve.errors.front();
  out.verdict = decreasing && shrinks;
  out.results = {{"curve", curve_json(curve)}, {"decreasing", decreasing}, {"final_below_ratio", shrinks}};
  out.csv_files.emplace_back("smoothing_curve.csv", curve_csv(curve));
  return out;
}

inline ExperimentOutput run_epsilon_limit(const ExperimentConfig& cfg) {
  require_paths(cfg);
  const ConvexOracle f = build_function(cfg);
  const Selection sel = make_selection(selection_kind(cfg.selection), f, cfg.seed, cfg.samples);
  const auto res = epsilon_convergence_experiment(f, make_ensemble(cfg), cfg.eps_schedule, cfg.r, cfg.r_prime, sel,
                                                  cfg.workers, cfg.seed);
  ExperimentOutput out;
  const bool decreasing = res.curve.decreasing(cfg.tolerances.curve_slack);
  const bool small = res.curve.errors.back() <= cfg.tolerances.epsilon_final;
  out.verdict = decreasing && small;
  out.results = {{"curve", curve_json(res.curve)},
                 {"perturbed_term", res.perturbed_term},
                 {"base_term", res.base_term},
                 {"cross_term", res.cross_term},
                 {"decreasing", decreasing},
                 {"final_below_threshold", small}};
  out.csv_files.emplace_back("epsilon_curve.csv", curve_csv(res.curve));
  auto csv = csv_stream();
  csv << "param,perturbed,base,cross\n";
  for (std::size_t e = 0; e < res.curve.params.size(); ++e)
    csv << res.curve.params[e] << ',' << res.perturbed_term[e] << ',' << res.base_term[e] << ',' << res.cross_term[e]
        << '\n';
  out.csv_files.emplace_back("epsilon_terms.csv", csv.str());
  return out;
}

inline ExperimentOutput run_conditions(const ExperimentConfig& cfg) {
  require_paths(cfg);
  const ConvexOracle f = build_function(cfg);
  const Selection sel = make_selection(selection_kind(cfg.selection), f, cfg.seed, cfg.samples);
  const Ensemble ens = make_ensemble(cfg);
  std::vector<ConditionReport> reps;
  for (double eps : cfg.eps_schedule)
    reps.push_back(condition_estimates(f, ens, eps, cfg.r, cfg.r_prime, sel, cfg.workers));

  bool e1_ok = true;
  double e2_lo = reps[0].e2, e2_hi = reps[0].e2, e3_lo = reps[0].e3, e3_hi = reps[0].e3;
  auto csv = csv_stream();
  csv << "epsilon,e1,e1_stderr,e2,e2_stderr,e3,e3_stderr,sup_b,e1_bound\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : reps) {
    const double bound = r.epsilon * r.k_bound * r.sup_b;
    e1_ok = e1_ok && r.e1 <= bound + 1e-12;
    e2_lo = std::min(e2_lo, r.e2);
    e2_hi = std::max(e2_hi, r.e2);
    e3_lo = std::min(e3_lo, r.e3);
    e3_hi = std::max(e3_hi, r.e3);
    csv << r.epsilon << ',' << r.e1 << ',' << r.e1_se << ',' << r.e2 << ',' << r.e2_se << ',' << r.e3 << ',' << r.e3_se
        << ',' << r.sup_b << ',' << bound << '\n';
    rows.push_back({{"epsilon", r.epsilon}, {"e1", r.e1}, {"e2", r.e2}, {"e3", r.e3}, {"sup_b", r.sup_b},
                    {"e1_bound", bound}, {"c_bound", r.c_bound}, {"k_bound", r.k_bound}});
  }
  auto ratio = [](double lo, double hi) { return lo > 0.0 ? hi / lo : (hi > 0.0 ? INFINITY : 1.0); };
  const double e2_spread = ratio(e2_lo, e2_hi), e3_spread = ratio(e3_lo, e3_hi);
  ExperimentOutput out;
  out.verdict = e1_ok && e2_spread < cfg.tolerances.condition_spread && e3_spread < cfg.tolerances.condition_spread;
  out.results = {{"rows", rows}, {"e1_within_bound", e1_ok}, {"e2_spread", e2_spread}, {"e3_spread", e3_spread}};
  out.csv_files.emplace_back("conditions.csv", csv.str());
  return out;
}

/// A random point in the ball of radius 2; every second one is moved onto
/// the coincidence set of two random pieces so that kinks get exercised.
inline Vector probe_point(const PLConvex& f, std::size_t index, Stream& rng) {
  const int d = f.dim();
  Vector x = 2.0 * std::pow(rng.uniform(), 1.0 / d) * rng.unit_vector(d);
  if (index % 2 == 1 && f.size() >= 2) {
    const std::size_t a = rng.index_below(f.size());
    std::size_t b = rng.index_below(f.size() - 1);
    if (b >= a) ++b;
    const Vector diff = f.piece(a).beta - f.piece(b).beta;
    const double sq = diff.squaredNorm();
    if (sq > 0.0) x -= (f.piece(a)(x) - f.piece(b)(x)) / sq * diff;
  }
  return x;
}

inline ExperimentOutput run_selection_checks(const ExperimentConfig& cfg, bool directional) {
  const int d = cfg.function.dim;
  const std::size_t k = cfg.function.name == "random_pl" ? cfg.function.pieces : 4;

  struct PointOut {
    double margin;
    bool ok, settled;
  };
  const auto per_function = parallel_map<std::vector<PointOut>>(
      cfg.n_functions,
      [&](std::size_t fi) {
        Stream rng(cfg.seed, StreamTag::sampling, fi + 1);
        const ConvexOracle f = ConvexOracle::from_pl(random_pl(d, k, rng));
        std::vector<PointOut> outs;
        for (std::size_t pi = 0; pi < cfg.n_points; ++pi) {
          const Vector x = probe_point(*f.pl(), pi, rng);
          const auto dirs = random_directions(d, 32, rng);
          PointOut o{0.0, false, true};
          if (directional) {
            const Vector y = rng.unit_vector(d);
            try {
              const auto lim = directional_limit(f, x, y, cfg.theta_schedule);
              const auto chk = subgradient_check(f, x, lim.value, dirs, cfg.tolerances.subgradient, cfg.lambda_schedule);
              o = {chk.worst_margin, chk.ok && lim.member, true};
            } catch (const LimitFailure& e) {
              o = {-e.oscillation(), false, false};
            }
          } else {
            Stream mrng(cfg.seed, StreamTag::mollifier, fi * cfg.n_points + pi);
            const auto est = mollified_subgradient(f, x, cfg.theta_schedule, cfg.samples, mrng);
            const auto chk = subgradient_check(f, x, est.value, dirs, cfg.tolerances.subgradient, cfg.lambda_schedule);
            o = {chk.worst_margin, chk.ok, est.converged};
          }
          outs.push_back(o);
        }
        return outs;
      },
      cfg.workers);

  std::size_t violations = 0, unsettled = 0;
  double worst = std::numeric_limits<double>::infinity();
  auto csv = csv_stream();
  csv << "function,point,worst_margin,ok,settled\n";
  for (std::size_t fi = 0; fi < per_function.size(); ++fi)
    for (std::size_t pi = 0; pi < per_function[fi].size(); ++pi) {
      const auto& o = per_function[fi][pi];
      if (!o.ok) ++violations;
      if (!o.settled) ++unsettled;
      worst = std::min(worst, o.margin);
      csv << fi << ',' << pi << ',' << o.margin << ',' << (o.ok ? 1 : 0) << ',' << (o.settled ? 1 : 0) << '\n';
    }
  ExperimentOutput out;
  out.verdict = violations == 0;
  out.results = {{"functions", cfg.n_functions}, {"points_per_function", cfg.n_points}, {"pieces", k},
                 {"dim", d},                     {"violations", violations},         {"unsettled", unsettled},
                 {"worst_margin", worst}};
  out.csv_files.emplace_back(directional ? "directional_checks.csv" : "mollified_checks.csv", csv.str());
  return out;
}

inline void write_file(const std::filesystem::path& path, std::string_view body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  switch (cfg.experiment) {
    case Experiment::tanaka_baseline: return detail::run_tanaka_baseline(cfg);
    case Experiment::pl_decomposition: return detail::run_pl_decomposition(cfg);
    case Experiment::smoothing: return detail::run_smoothing(cfg);
    case Experiment::epsilon_limit: return detail::run_epsilon_limit(cfg);
    case Experiment::conditions: return detail::run_conditions(cfg);
    case Experiment::mollified_selection: return detail::run_selection_checks(cfg, false);
    case Experiment::directional_limit: return detail::run_selection_checks(cfg, true);
  }
  throw InvalidInput("unknown experiment");
}

/// Runs the experiment and writes its artifacts. CSVs start with a
/// `# seed=... config_digest=...` line; report.json carries both as fields.
inline RunManifest run(const ExperimentConfig& cfg) {
  const auto started = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.config = to_json(cfg);
  manifest.config_digest = config_digest(cfg);

  const ExperimentOutput result = run_experiment(cfg);
  manifest.verdict = result.verdict;
  manifest.exit_code = result.verdict ? exit_pass : exit_verdict_failure;

  const std::filesystem::path dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  auto emit = [&](const std::string& name, const std::string& body) {
    detail::write_file(dir / name, body);
    manifest.files.push_back({name, sha256_hex(body), body.size()});
  };
  const std::string header = "# seed=" + std::to_string(cfg.seed) + " config_digest=" + manifest.config_digest + "\n";
  for (const auto& [name, body] : result.csv_files) emit(name, header + body);

  const nlohmann::json report{{"experiment", to_string(cfg.experiment)},
                              {"seed", cfg.seed},
                              {"config_digest", manifest.config_digest},
                              {"tool_version", kToolVersion},
                              {"verdict", result.verdict ? "pass" : "fail"},
                              {"results", result.results}};
  emit("report.json", report.dump(2) + "\n");

  manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : manifest.files) files.push_back({{"name", f.name}, {"sha256", f.sha256}, {"bytes", f.bytes}});
  const nlohmann::json mj{{"config", manifest.config},
                          {"config_digest", manifest.config_digest},
                          {"tool_version", manifest.tool_version},
                          {"wall_seconds", manifest.wall_seconds},
                          {"files", files},
                          {"verdict", manifest.verdict},
                          {"exit_code", manifest.exit_code}};
  detail::write_file(dir / "manifest.json", mj.dump(2) + "\n");
  return manifest;
}

}  // namespace itolab

#pragma once

// Discrete stochastic calculus on a grid: left-point Ito sums, quadratic
// (co)variation, total variation, local-time estimators, H^p norms, and a
// fixed-checkpoint test of the martingale property across an ensemble.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "itolab/errors.hpp"
#include "itolab/path_sim.hpp"
#include "itolab/stats.hpp"

namespace itolab {

inline constexpr std::size_t kNoStop = std::numeric_limits<std::size_t>::max();

/// sgn(x) = -1 for x <= 0, +1 otherwise: the left derivative of |x|.
inline double sgn(double x) { return x <= 0.0 ? -1.0 : 1.0; }

struct IntegralPath {
  GridPtr grid;
  std::vector<double> values;  ///< values[0] = 0
  std::string integrand_label;

  double terminal() const { return values.back(); }
};

/// values[j+1] = values[j] + <h[j], m[j+1] - m[j]>. Row j of h is only ever
/// paired with the increment that starts at t_j. Increments from index `stop`
/// on are dropped, which gives the integral of the stopped integrator.
inline IntegralPath ito_integral(const PathMatrix& h, const PathMatrix& m, GridPtr grid, std::string label = "",
                                 std::size_t stop = kNoStop) {
  if (grid && static_cast<std::size_t>(m.rows()) != grid->size())
    throw InvalidInput("ito_integral: integrator does not match the grid");
  if (m.rows() < 1) throw InvalidInput("ito_integral: empty integrator");
  const Eigen::Index steps = m.rows() - 1;
  if (h.rows() < steps || h.cols() != m.cols())
    throw InvalidInput("ito_integral: integrand shape does not match the integrator");
  IntegralPath out{std::move(grid), std::vector<double>(static_cast<std::size_t>(m.rows()), 0.0), std::move(label)};
  const Eigen::Index last = stop == kNoStop ? steps : std::min<Eigen::Index>(steps, static_cast<Eigen::Index>(stop));
  double acc = 0.0;
  for (Eigen::Index j = 0; j < steps; ++j) {
    if (j < last) {
      double inc = 0.0;
      for (Eigen::Index i = 0; i < m.cols(); ++i) inc += h(j, i) * (m(j + 1, i) - m(j, i));
      acc += inc;
    }
    out.values[static_cast<std::size_t>(j + 1)] = acc;
  }
  return out;
}

struct QVPath {
  GridPtr grid;
  std::vector<double> values;  ///< nondecreasing, values[0] = 0

  double terminal() const { return values.back(); }
};

/// Running sum of <dm, dn> over the first `stop` increments.
inline std::vector<double> quadratic_covariation(const PathMatrix& m, const PathMatrix& n, std::size_t stop = kNoStop) {
  if (m.rows() != n.rows() || m.cols() != n.cols())
    throw InvalidInput("quadratic_covariation: paths differ in shape");
  std::vector<double> out(static_cast<std::size_t>(m.rows()), 0.0);
  double acc = 0.0;
  for (Eigen::Index j = 0; j + 1 < m.rows(); ++j) {
    if (static_cast<std::size_t>(j) < stop) acc += (m.row(j + 1) - m.row(j)).dot(n.row(j + 1) - n.row(j));
    out[static_cast<std::size_t>(j + 1)] = acc;
  }
  return out;
}

/// Running sum of |dm|^2 (the trace of the matrix bracket when d > 1).
inline QVPath quadratic_variation(const PathMatrix& m, GridPtr grid = nullptr, std::size_t stop = kNoStop) {
  QVPath out{std::move(grid), std::vector<double>(static_cast<std::size_t>(m.rows()), 0.0)};
  double acc = 0.0;
  for (Eigen::Index j = 0; j + 1 < m.rows(); ++j) {
    if (static_cast<std::size_t>(j) < stop) acc += (m.row(j + 1) - m.row(j)).squaredNorm();
    out.values[static_cast<std::size_t>(j + 1)] = acc;
  }
  return out;
}

inline QVPath quadratic_variation(std::span<const double> series, std::size_t stop = kNoStop) {
  const Eigen::Map<const PathMatrix> m(series.data(), static_cast<Eigen::Index>(series.size()), 1);
  return quadratic_variation(PathMatrix(m), nullptr, stop);
}

/// sum_j sum_i |a[j+1, i] - a[j, i]| over the first `stop` increments.
inline double total_variation(const PathMatrix& a, std::size_t stop = kNoStop) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j + 1 < a.rows() && static_cast<std::size_t>(j) < stop; ++j)
    acc += (a.row(j + 1) - a.row(j)).cwiseAbs().sum();
  return acc;
}

inline double total_variation(std::span<const double> series, std::size_t stop = kNoStop) {
  double acc = 0.0;
  for (std::size_t j = 0; j + 1 < series.size() && j < stop; ++j) acc += std::abs(series[j + 1] - series[j]);
  return acc;
}

enum class LocalTimeMethod { tanaka, occupation };

struct LocalTimePath {
  GridPtr grid;
  std::vector<double> values;
  LocalTimeMethod method = LocalTimeMethod::tanaka;

  double terminal() const { return values.back(); }
};

/// Discrete Tanaka formula at `level`:
///   L[j] = |x[j] - c| - |x[0] - c| - sum_{i<j} sgn(x[i] - c) (x[i+1] - x[i]).
/// Each increment is |y'| - |y| - sgn(y)(y' - y) >= 0, so L is nondecreasing
/// up to rounding.
inline std::vector<double> local_time_tanaka(std::span<const double> x, double level) {
  if (x.empty()) throw InvalidInput("local_time_tanaka: empty series");
  std::vector<double> out(x.size(), 0.0);
  const double start = std::abs(x[0] - level);
  double sum = 0.0;
  for (std::size_t j = 0; j + 1 < x.size(); ++j) {
    sum += sgn(x[j] - level) * (x[j + 1] - x[j]);
    out[j + 1] = std::abs(x[j + 1] - level) - start - sum;
  }
  return out;
}

inline std::vector<double> column(const PathMatrix& p, int i = 0) {
  std::vector<double> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index j = 0; j < p.rows(); ++j) out[static_cast<std::size_t>(j)] = p(j, i);
  return out;
}

inline LocalTimePath local_time_tanaka(const SemimartingalePath& path, double level) {
  if (path.dim() != 1) throw UnsupportedDimension("local_time_tanaka: only d = 1 is supported");
  return {path.grid_ptr(), local_time_tanaka(column(path.x()), level), LocalTimeMethod::tanaka};
}

/// Occupation-density estimate (1 / 2h) sum_j 1{|x[j] - c| < h} (x[j+1] - x[j])^2.
inline double local_time_occupation(std::span<const double> x, double level, double bandwidth) {
  if (!(bandwidth > 0.0)) throw InvalidInput("local_time_occupation: bandwidth must be positive");
  double acc = 0.0;
  for (std::size_t j = 0; j + 1 < x.size(); ++j)
    if (std::abs(x[j] - level) < bandwidth) acc += (x[j + 1] - x[j]) * (x[j + 1] - x[j]);
  return acc / (2.0 * bandwidth);
}

inline double local_time_occupation(const SemimartingalePath& path, double level, double bandwidth) {
  if (path.dim() != 1) throw UnsupportedDimension("local_time_occupation: only d = 1 is supported");
  return local_time_occupation(column(path.x()), level, bandwidth);
}

/// Default bandwidth 4 sqrt(dt).
inline double default_bandwidth(const TimeGrid& grid) { return 4.0 * std::sqrt(grid.max_dt()); }

// ---------------------------------------------------------------------------
// H^p norms

struct HpEstimate {
  double p = 1.0;
  double value = 0.0;
  std::size_t n_paths = 0;
  double std_error = 0.0;
};

/// <M, M>_T^{1/2} + int_0^T |dA| for one path, T given as a grid index.
inline double hp_path_value(const PathMatrix& m, const PathMatrix& a, std::size_t stop = kNoStop) {
  return std::sqrt(quadratic_variation(m, nullptr, stop).terminal()) + total_variation(a, stop);
}

/// (mean v^p)^{1/p} over per-path values v, with a 200-resample bootstrap
/// standard error. Power means are nondecreasing in p.
inline HpEstimate hp_norm_estimate(std::span<const double> path_values, double p, std::uint64_t seed = 0) {
  if (!(p >= 1.0)) throw InvalidInput("hp_norm_estimate: p must be >= 1");
  if (path_values.empty()) throw InsufficientData("hp_norm_estimate: empty ensemble");
  auto power_mean = [&](auto&& indices) {
    double acc = 0.0;
    std::size_t count = 0;
    for (std::size_t i : indices) {
      acc += std::pow(path_values[i], p);
      ++count;
    }
    return std::pow(acc / static_cast<double>(count), 1.0 / p);
  };
  std::vector<std::size_t> all(path_values.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  HpEstimate out{p, power_mean(all), path_values.size(), 0.0};
  if (path_values.size() > 1)
    out.std_error = bootstrap_stderr(
        path_values.size(), [&](std::span<const std::size_t> idx) { return power_mean(idx); }, seed);
  return out;
}

inline HpEstimate hp_norm_estimate(std::span<const SemimartingalePath> ensemble, double p, std::uint64_t seed = 0) {
  std::vector<double> values;
  values.reserve(ensemble.size());
  for (const auto& path : ensemble) values.push_back(hp_path_value(path.m(), path.a()));
  return hp_norm_estimate(values, p, seed);
}

// ---------------------------------------------------------------------------
// Martingale test

struct MartingaleThresholds {
  double z_crit = 4.0;
  double corr_crit = 0.1;
};

struct MartingaleTestReport {
  std::vector<double> checkpoints;
  std::vector<double> increment_means, std_errors, z;
  double max_abs_z = 0.0;
  double lag1_corr = 0.0;  ///< the consecutive-increment correlation of largest magnitude
  std::size_t n_paths = 0;
  bool verdict = false;
};

inline constexpr std::size_t kMinMartingalePaths = 100;

/// values(p, k) = N_p at checkpoints[k]; N_p(0) = 0 is implied. For each
/// window (t_{k-1}, t_k] the mean increment across paths gets a z-score; the
/// lag-1 correlation is taken across paths between consecutive windows.
inline MartingaleTestReport martingale_test(const Eigen::MatrixXd& values, std::span<const double> checkpoints,
                                            MartingaleThresholds thresholds = {}) {
  const auto n = static_cast<std::size_t>(values.rows());
  if (n < kMinMartingalePaths)
    throw InsufficientData("martingale_test: need at least " + std::to_string(kMinMartingalePaths) + " paths, got " +
                           std::to_string(n));
  if (checkpoints.empty() || static_cast<std::size_t>(values.cols()) != checkpoints.size())
    throw InvalidInput("martingale_test: one column per checkpoint required");
  for (std::size_t k = 1; k < checkpoints.size(); ++k)
    if (!(checkpoints[k] > checkpoints[k - 1])) throw InvalidInput("martingale_test: checkpoints must increase");

  MartingaleTestReport rep;
  rep.checkpoints.assign(checkpoints.begin(), checkpoints.end());
  rep.n_paths = n;
  std::vector<std::vector<double>> increments(checkpoints.size(), std::vector<double>(n));
  for (std::size_t k = 0; k < checkpoints.size(); ++k) {
    for (std::size_t p = 0; p < n; ++p) {
      const auto r = static_cast<Eigen::Index>(p);
      const double prev = k == 0 ? 0.0 : values(r, static_cast<Eigen::Index>(k - 1));
      increments[k][p] = values(r, static_cast<Eigen::Index>(k)) - prev;
    }
    const double m = mean(increments[k]);
    const double se = standard_error(increments[k]);
    double z = 0.0;
    if (se > 0.0) z = m / se;
    else if (m != 0.0) z = std::copysign(std::numeric_limits<double>::infinity(), m);
    rep.increment_means.push_back(m);
    rep.std_errors.push_back(se);
    rep.z.push_back(z);
    rep.max_abs_z = std::max(rep.max_abs_z, std::abs(z));
  }
  for (std::size_t k = 0; k + 1 < checkpoints.size(); ++k) {
    const double c = correlation(increments[k], increments[k + 1]);
    if (std::abs(c) > std::abs(rep.lag1_corr)) rep.lag1_corr = c;
  }
  rep.verdict = rep.max_abs_z <= thresholds.z_crit && std::abs(rep.lag1_corr) <= thresholds.corr_crit;
  return rep;
}

inline MartingaleTestReport martingale_test(std::span<const IntegralPath> ensemble, std::span<const double> checkpoints,
                                            MartingaleThresholds thresholds = {}) {
  if (ensemble.size() < kMinMartingalePaths)
    throw InsufficientData("martingale_test: need at least " + std::to_string(kMinMartingalePaths) + " paths, got " +
                           std::to_string(ensemble.size()));
  Eigen::MatrixXd values(static_cast<Eigen::Index>(ensemble.size()), static_cast<Eigen::Index>(checkpoints.size()));
  for (std::size_t p = 0; p < ensemble.size(); ++p) {
    const auto& path = ensemble[p];
    if (!path.grid) throw InvalidInput("martingale_test: integral path without grid");
    for (std::size_t k = 0; k < checkpoints.size(); ++k)
      values(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) =
          path.values[path.grid->index_at(checkpoints[k])];
  }
  return martingale_test(values, checkpoints, thresholds);
}

/// Quarter-horizon checkpoints.
inline std::vector<double> default_checkpoints(double horizon) {
  return {0.25 * horizon, 0.5 * horizon, 0.75 * horizon, horizon};
}

/// One record per checkpoint: `checkpoint_t,mean_increment,std_error,z`.
inline void write_martingale_report(std::ostream& out, const MartingaleTestReport& rep) {
  const auto old_precision = out.precision(17);
  out << "checkpoint_t,mean_increment,std_error,z\n";
  for (std::size_t k = 0; k < rep.checkpoints.size(); ++k)
    out << rep.checkpoints[k] << ',' << rep.increment_means[k] << ',' << rep.std_errors[k] << ',' << rep.z[k] << '\n';
  out.precision(old_precision);
}

}  // namespace itolab

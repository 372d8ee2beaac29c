#pragma once

// Discrete-time continuous semimartingales X = X0 + M + A with the martingale
// part M and the finite-variation part A kept separately, independent
// Brownian perturbations X + eps B, and exit-time localisation.

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "itolab/convex_core.hpp"
#include "itolab/errors.hpp"
#include "itolab/rng.hpp"

namespace itolab {

/// Row j holds the d coordinates at grid time t_j.
using PathMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class TimeGrid {
 public:
  explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw InvalidInput("TimeGrid: need at least two times");
    if (times_.front() != 0.0) throw InvalidInput("TimeGrid: must start at t = 0");
    for (std::size_t j = 1; j < times_.size(); ++j)
      if (!(times_[j] > times_[j - 1])) throw InvalidInput("TimeGrid: times must be strictly increasing");
    const double h0 = times_[1] - times_[0];
    uniform_ = true;
    for (std::size_t j = 1; j + 1 < times_.size(); ++j)
      if (std::abs((times_[j + 1] - times_[j]) - h0) > 1e-12 * std::max(1.0, times_.back())) uniform_ = false;
  }

  static TimeGrid uniform(double horizon, std::size_t steps) {
    if (!(horizon > 0.0)) throw InvalidInput("TimeGrid: horizon must be positive");
    if (steps < 1) throw InvalidInput("TimeGrid: need at least one step");
    std::vector<double> t(steps + 1);
    for (std::size_t j = 0; j <= steps; ++j) t[j] = horizon * static_cast<double>(j) / static_cast<double>(steps);
    return TimeGrid(std::move(t));
  }

  std::size_t steps() const { return times_.size() - 1; }
  std::size_t size() const { return times_.size(); }
  double horizon() const { return times_.back(); }
  double time(std::size_t j) const { return times_[j]; }
  double dt(std::size_t j) const { return times_[j + 1] - times_[j]; }
  double max_dt() const {
    double m = 0.0;
    for (std::size_t j = 0; j < steps(); ++j) m = std::max(m, dt(j));
    return m;
  }
  bool is_uniform() const { return uniform_; }
  const std::vector<double>& times() const { return times_; }

  /// First index with t_j >= t (the last index when t exceeds the horizon).
  std::size_t index_at(double t) const {
    for (std::size_t j = 0; j < times_.size(); ++j)
      if (times_[j] >= t - 1e-12 * std::max(1.0, horizon())) return j;
    return times_.size() - 1;
  }

  /// Every factor-th point; steps() must be divisible by factor.
  TimeGrid coarsen(std::size_t factor) const {
    if (factor == 0 || steps() % factor != 0) throw InvalidInput("TimeGrid: coarsening factor must divide steps");
    std::vector<double> t;
    for (std::size_t j = 0; j < times_.size(); j += factor) t.push_back(times_[j]);
    return TimeGrid(std::move(t));
  }

 private:
  std::vector<double> times_;
  bool uniform_ = true;
};

using GridPtr = std::shared_ptr<const TimeGrid>;

inline GridPtr make_grid(double horizon, std::size_t steps) {
  return std::make_shared<const TimeGrid>(TimeGrid::uniform(horizon, steps));
}

/// X_t = X_0 + M_t + A_t on a grid. x is computed once as (x0 + m) + a, so
/// the identity holds bit for bit.
class SemimartingalePath {
 public:
  SemimartingalePath(GridPtr grid, Vector x0, PathMatrix m, PathMatrix a)
      : grid_(std::move(grid)), x0_(std::move(x0)), m_(std::move(m)), a_(std::move(a)) {
    if (!grid_) throw InvalidInput("SemimartingalePath: missing grid");
    const auto rows = static_cast<Eigen::Index>(grid_->size());
    const auto d = x0_.size();
    if (d < 1) throw InvalidInput("SemimartingalePath: dimension must be >= 1");
    if (m_.rows() != rows || a_.rows() != rows || m_.cols() != d || a_.cols() != d)
      throw InvalidInput("SemimartingalePath: component shapes do not match the grid and x0");
    if (!m_.row(0).isZero(0.0) || !a_.row(0).isZero(0.0))
      throw InvalidInput("SemimartingalePath: M and A must start at 0");
    x_.resize(rows, d);
    for (Eigen::Index j = 0; j < rows; ++j)
      for (Eigen::Index i = 0; i < d; ++i) x_(j, i) = (x0_[i] + m_(j, i)) + a_(j, i);
  }

  const TimeGrid& grid() const { return *grid_; }
  const GridPtr& grid_ptr() const { return grid_; }
  int dim() const { return static_cast<int>(x0_.size()); }
  std::size_t size() const { return grid_->size(); }
  const Vector& x0() const { return x0_; }
  const PathMatrix& m() const { return m_; }
  const PathMatrix& a() const { return a_; }
  const PathMatrix& x() const { return x_; }
  Vector point(std::size_t j) const { return x_.row(static_cast<Eigen::Index>(j)).transpose(); }

  /// The same path observed on every factor-th grid point.
  SemimartingalePath coarsen(std::size_t factor) const {
    auto coarse = std::make_shared<const TimeGrid>(grid_->coarsen(factor));
    const auto rows = static_cast<Eigen::Index>(coarse->size());
    PathMatrix m(rows, dim()), a(rows, dim());
    for (Eigen::Index j = 0; j < rows; ++j) {
      m.row(j) = m_.row(j * static_cast<Eigen::Index>(factor));
      a.row(j) = a_.row(j * static_cast<Eigen::Index>(factor));
    }
    return SemimartingalePath(std::move(coarse), x0_, std::move(m), std::move(a));
  }

 private:
  GridPtr grid_;
  Vector x0_;
  PathMatrix m_, a_, x_;
};

/// Standard Brownian motion in R^d on the grid, starting at 0.
inline PathMatrix simulate_bm(const TimeGrid& grid, int d, Stream& rng) {
  if (d < 1) throw InvalidInput("simulate_bm: dimension must be >= 1");
  PathMatrix b = PathMatrix::Zero(static_cast<Eigen::Index>(grid.size()), d);
  for (std::size_t j = 0; j < grid.steps(); ++j) {
    const double sd = std::sqrt(grid.dt(j));
    const auto r = static_cast<Eigen::Index>(j);
    for (int i = 0; i < d; ++i) b(r + 1, i) = b(r, i) + sd * rng.gaussian();
  }
  return b;
}

/// Recipe for test processes. Martingale part: zero, scale * B, or the Euler
/// scheme for dM = sigma(X) dB with sigma_i(x) = scale * (1 + sin(x_i) / 2).
/// Finite-variation part: zero or drift_rate * t. During a frozen window both
/// parts are held constant, so the path sits still there.
struct ProcessRecipe {
  enum class Martingale { zero, brownian, sigma_sine };
  enum class Drift { zero, linear };

  int dim = 1;
  Vector x0;  ///< empty means the origin
  Martingale martingale = Martingale::brownian;
  double scale = 1.0;
  Drift drift = Drift::zero;
  Vector drift_rate;  ///< empty means the zero vector
  std::vector<std::pair<double, double>> frozen;

  Vector start() const { return x0.size() == 0 ? Vector::Zero(dim) : x0; }
};

inline std::string to_string(ProcessRecipe::Martingale m) {
  switch (m) {
    case ProcessRecipe::Martingale::zero: return "zero";
    case ProcessRecipe::Martingale::brownian: return "bm";
    case ProcessRecipe::Martingale::sigma_sine: return "sigma_sine";
  }
  return "?";
}

inline std::string to_string(ProcessRecipe::Drift a) {
  return a == ProcessRecipe::Drift::zero ? "zero" : "linear";
}

inline bool is_frozen(const ProcessRecipe& recipe, double t0, double t1) {
  for (const auto& [lo, hi] : recipe.frozen)
    if (t0 >= lo && t1 <= hi) return true;
  return false;
}

inline SemimartingalePath build_semimartingale(const ProcessRecipe& recipe, GridPtr grid, Stream& rng) {
  const int d = recipe.dim;
  if (d < 1) throw InvalidInput("build_semimartingale: dimension must be >= 1");
  const Vector x0 = recipe.start();
  if (x0.size() != d) throw InvalidInput("build_semimartingale: x0 has wrong dimension");
  const Vector rate = recipe.drift_rate.size() == 0 ? Vector::Zero(d) : recipe.drift_rate;
  if (rate.size() != d) throw InvalidInput("build_semimartingale: drift_rate has wrong dimension");
  for (const auto& [lo, hi] : recipe.frozen)
    if (!(lo < hi)) throw InvalidInput("build_semimartingale: frozen window must have lo < hi");

  const auto rows = static_cast<Eigen::Index>(grid->size());
  PathMatrix m = PathMatrix::Zero(rows, d), a = PathMatrix::Zero(rows, d);
  Vector x = x0;
  for (std::size_t j = 0; j < grid->steps(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    const double h = grid->dt(j);
    const double sd = std::sqrt(h);
    const bool frozen = is_frozen(recipe, grid->time(j), grid->time(j + 1));
    for (int i = 0; i < d; ++i) {
      // Draw even when frozen so the stream stays aligned across recipes.
      const double z = rng.gaussian();
      double dm = 0.0;
      switch (recipe.martingale) {
        case ProcessRecipe::Martingale::zero: break;
        case ProcessRecipe::Martingale::brownian: dm = recipe.scale * sd * z; break;
        case ProcessRecipe::Martingale::sigma_sine:
          dm = recipe.scale * (1.0 + 0.5 * std::sin(x[i])) * sd * z;
          break;
      }
      const double da = recipe.drift == ProcessRecipe::Drift::linear ? rate[i] * h : 0.0;
      m(r + 1, i) = frozen ? m(r, i) : m(r, i) + dm;
      a(r + 1, i) = frozen ? a(r, i) : a(r, i) + da;
      x[i] = (x0[i] + m(r + 1, i)) + a(r + 1, i);
    }
  }
  return SemimartingalePath(std::move(grid), x0, std::move(m), std::move(a));
}

/// X~ = X + eps B: martingale part M + eps B, same finite-variation part.
struct PerturbedPath {
  SemimartingalePath base;
  double epsilon;
  PathMatrix b;
  SemimartingalePath result;
};

/// B comes from the caller's stream, which must be disjoint from the one
/// that built the base path (see StreamTag::perturbation).
inline PerturbedPath perturb(const SemimartingalePath& xpath, double epsilon, Stream& rng) {
  if (!(epsilon >= 0.0)) throw InvalidInput("perturb: epsilon must be >= 0");
  PathMatrix b = simulate_bm(xpath.grid(), xpath.dim(), rng);
  PathMatrix m = xpath.m() + epsilon * b;
  SemimartingalePath result(xpath.grid_ptr(), xpath.x0(), std::move(m), xpath.a());
  return {xpath, epsilon, std::move(b), std::move(result)};
}

/// Perturbation with a given Brownian path (common random numbers across eps).
inline PerturbedPath perturb_with(const SemimartingalePath& xpath, double epsilon, const PathMatrix& b) {
  if (!(epsilon >= 0.0)) throw InvalidInput("perturb: epsilon must be >= 0");
  if (b.rows() != xpath.m().rows() || b.cols() != xpath.m().cols())
    throw InvalidInput("perturb: noise path has wrong shape");
  PathMatrix m = xpath.m() + epsilon * b;
  SemimartingalePath result(xpath.grid_ptr(), xpath.x0(), std::move(m), xpath.a());
  return {xpath, epsilon, b, std::move(result)};
}

// ---------------------------------------------------------------------------
// Stopping times

enum class StopKind { exit_radius, horizon, min_of };

struct StoppingRecord {
  std::size_t index = 0;
  double time = 0.0;
  StopKind kind = StopKind::horizon;
  double radius = std::numeric_limits<double>::quiet_NaN();  ///< set for exit_radius
  std::vector<StoppingRecord> parts;                         ///< set for min_of
};

/// First grid index with |X| >= r; the horizon if the path stays inside.
inline StoppingRecord stop_at_exit(const SemimartingalePath& path, double r) {
  if (!(r > 0.0)) throw InvalidInput("stop_at_exit: radius must be positive");
  const auto& x = path.x();
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    if (x.row(j).norm() >= r) {
      const auto idx = static_cast<std::size_t>(j);
      return {idx, path.grid().time(idx), StopKind::exit_radius, r, {}};
    }
  }
  const std::size_t last = path.grid().steps();
  return {last, path.grid().horizon(), StopKind::horizon, std::numeric_limits<double>::quiet_NaN(), {}};
}

inline StoppingRecord stop_at_exit(const PerturbedPath& path, double r) { return stop_at_exit(path.result, r); }

/// T = T_1 ^ T_2 ^ ...
inline StoppingRecord min_of(std::vector<StoppingRecord> parts) {
  if (parts.empty()) throw InvalidInput("min_of: no stopping times");
  StoppingRecord out;
  out.kind = StopKind::min_of;
  out.index = parts.front().index;
  out.time = parts.front().time;
  for (const auto& p : parts) {
    if (p.index < out.index) {
      out.index = p.index;
      out.time = p.time;
    }
  }
  out.parts = std::move(parts);
  return out;
}

// ---------------------------------------------------------------------------
// Ensembles

/// n_paths paths of one recipe. Path i and its perturbation noise come from
/// the substreams (seed, base_path, i) and (seed, perturbation, i), so any
/// subset of paths can be regenerated alone and in any order.
class Ensemble {
 public:
  Ensemble(ProcessRecipe recipe, GridPtr grid, std::size_t n_paths, std::uint64_t seed)
      : recipe_(std::move(recipe)), grid_(std::move(grid)), n_paths_(n_paths), seed_(seed) {
    if (!grid_) throw InvalidInput("Ensemble: missing grid");
  }

  std::size_t size() const { return n_paths_; }
  std::uint64_t seed() const { return seed_; }
  const GridPtr& grid() const { return grid_; }
  const ProcessRecipe& recipe() const { return recipe_; }
  int dim() const { return recipe_.dim; }

  SemimartingalePath path(std::size_t i) const {
    Stream rng(seed_, StreamTag::base_path, i);
    return build_semimartingale(recipe_, grid_, rng);
  }

  PathMatrix noise(std::size_t i) const {
    Stream rng(seed_, StreamTag::perturbation, i);
    return simulate_bm(*grid_, recipe_.dim, rng);
  }

  PerturbedPath perturbed(std::size_t i, double epsilon) const { return perturb_with(path(i), epsilon, noise(i)); }

  /// Same ensemble on a different grid (used for refinement contrasts).
  Ensemble with_grid(GridPtr grid) const { return Ensemble(recipe_, std::move(grid), n_paths_, seed_); }

 private:
  ProcessRecipe recipe_;
  GridPtr grid_;
  std::size_t n_paths_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// CSV dumps

inline void write_path_header(std::ostream& out, int d, bool with_id) {
  if (with_id) out << "path_id,";
  out << "t";
  for (const char* prefix : {"x_", "m_", "a_"})
    for (int i = 1; i <= d; ++i) out << ',' << prefix << i;
  out << '\n';
}

inline void write_path_rows(std::ostream& out, const SemimartingalePath& path, std::optional<std::size_t> id) {
  const auto old_precision = out.precision(17);
  for (std::size_t j = 0; j < path.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    if (id) out << *id << ',';
    out << path.grid().time(j);
    for (const PathMatrix* comp : {&path.x(), &path.m(), &path.a()})
      for (int i = 0; i < path.dim(); ++i) out << ',' << (*comp)(r, i);
    out << '\n';
  }
  out.precision(old_precision);
}

/// Header `t,x_1..x_d,m_1..m_d,a_1..a_d`, one row per grid point.
inline void write_path_csv(std::ostream& out, const SemimartingalePath& path) {
  write_path_header(out, path.dim(), false);
  write_path_rows(out, path, std::nullopt);
}

/// Long format with a leading path_id column.
inline void write_ensemble_csv(std::ostream& out, std::span<const SemimartingalePath> paths) {
  if (paths.empty()) return;
  write_path_header(out, paths.front().dim(), true);
  for (std::size_t i = 0; i < paths.size(); ++i) write_path_rows(out, paths[i], i);
}

}  // namespace itolab

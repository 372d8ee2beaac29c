#pragma once

// Experiments on f(X) for convex f: the explicit decomposition for
// max-of-affine f, convergence of the smoothed martingale parts, the
// perturbation conditions and eps -> 0 limit, and an end-to-end check that
// int subgrad f(X) dM is the martingale part of f(X).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "itolab/convex_core.hpp"
#include "itolab/errors.hpp"
#include "itolab/ito_engine.hpp"
#include "itolab/parallel.hpp"
#include "itolab/path_sim.hpp"
#include "itolab/stats.hpp"

namespace itolab {

// ---------------------------------------------------------------------------
// Subgradient selections

/// A single-valued choice x -> subgrad f(x) in the subdifferential of f.
struct Selection {
  std::string label;
  std::function<Vector(const Vector&)> fn;

  Vector operator()(const Vector& x) const { return fn(x); }
};

enum class SelectionKind { min_index_pl, mollified, left_derivative_1d, right_derivative_1d };

inline std::string to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::min_index_pl: return "min_index_pl";
    case SelectionKind::mollified: return "mollified";
    case SelectionKind::left_derivative_1d: return "left_derivative_1d";
    case SelectionKind::right_derivative_1d: return "right_derivative_1d";
  }
  return "?";
}

namespace detail {

inline std::uint64_t point_key(const Vector& x) {
  std::uint64_t h = 0x84222325cbf29ce4ULL;
  for (Eigen::Index i = 0; i < x.size(); ++i) h = splitmix64(h ^ std::bit_cast<std::uint64_t>(x[i]));
  return h;
}

/// One-sided derivative of a 1-d oracle: the slope of the active piece that
/// continues to the right (sign +1) or to the left (sign -1).
inline Selection one_sided_selection(const ConvexOracle& f, double sign, std::string label) {
  if (f.dim() != 1) throw InvalidInput("one-sided derivative selections need d = 1");
  if (const PLConvex* pl = f.pl()) {
    auto shared = std::make_shared<const PLConvex>(*pl);
    return {std::move(label), [shared, sign](const Vector& x) -> Vector {
              std::size_t best = 0;
              double best_slope = 0.0;
              bool first = true;
              for (std::size_t i : shared->active_set(x)) {
                const double s = sign * shared->piece(i).beta[0];
                if (first || s > best_slope) {
                  best = i;
                  best_slope = s;
                  first = false;
                }
              }
              return shared->piece(best).beta;
            }};
  }
  return {std::move(label), [f, sign](const Vector& x) -> Vector {
            const double h = 1e-10 * std::max(1.0, std::abs(x[0]));
            return f.subgrad(x + vec({sign * h}));
          }};
}

}  // namespace detail

/// Builds the named selection for f. The mollified selection is
/// deterministic in x: its Monte Carlo draws (only needed on kinks) are keyed
/// by the bits of x and the seed.
inline Selection make_selection(SelectionKind kind, const ConvexOracle& f, std::uint64_t seed = 0,
                                int samples = 256) {
  switch (kind) {
    case SelectionKind::min_index_pl: {
      const PLConvex* pl = f.pl();
      if (!pl) throw InvalidInput("min_index_pl selection needs a piecewise-linear function");
      auto shared = std::make_shared<const PLConvex>(*pl);
      return {"min_index_pl", [shared](const Vector& x) -> Vector { return shared->piece(shared->active_index(x)).beta; }};
    }
    case SelectionKind::mollified: {
      if (const PLConvex* pl = f.pl()) {
        auto shared = std::make_shared<const PLConvex>(*pl);
        return {"mollified", [shared, seed, samples](const Vector& x) -> Vector {
                  Stream rng(seed, StreamTag::mollifier, detail::point_key(x));
                  return mollified_limit_pl(*shared, x, samples, rng);
                }};
      }
      const auto thetas = geometric_schedule(1e-4);
      return {"mollified", [f, thetas, seed, samples](const Vector& x) -> Vector {
                Stream rng(seed, StreamTag::mollifier, detail::point_key(x));
                return mollified_subgradient(f, x, thetas, samples, rng).value;
              }};
    }
    case SelectionKind::left_derivative_1d:
      return detail::one_sided_selection(f, -1.0, "left_derivative_1d");
    case SelectionKind::right_derivative_1d:
      return detail::one_sided_selection(f, +1.0, "right_derivative_1d");
  }
  throw InvalidInput("unknown selection");
}

/// Row j = selection(x_j) for every grid point.
inline PathMatrix integrand(const Selection& sel, const PathMatrix& x) {
  PathMatrix h(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.rows(); ++j) h.row(j) = sel(x.row(j).transpose()).transpose();
  return h;
}

// ---------------------------------------------------------------------------
// Decomposition f(X_t) - f(X_0) = N_t + S_t

struct DecompositionResult {
  IntegralPath n;         ///< candidate martingale part int subgrad f(X) dM
  std::vector<double> s;  ///< residual: local-time and finite-variation part
  std::string f_label, selection_label;
};

inline DecompositionResult decompose(const ConvexOracle& f, const SemimartingalePath& path, const Selection& sel,
                                     std::size_t stop = kNoStop) {
  if (f.dim() != path.dim()) throw InvalidInput("decompose: function and path differ in dimension");
  const PathMatrix h = integrand(sel, path.x());
  DecompositionResult out{ito_integral(h, path.m(), path.grid_ptr(), sel.label, stop), {}, f.label(), sel.label};
  const double f0 = f.eval(path.point(0));
  out.s.resize(path.size());
  const std::size_t last = std::min(stop, path.grid().steps());
  for (std::size_t j = 0; j < path.size(); ++j) {
    const std::size_t at = std::min(j, last);
    out.s[j] = f.eval(path.point(at)) - f0 - out.n.values[j];
  }
  return out;
}

/// N = sum_i int 1{B_i}(X) beta_i dM with B_i the set where piece i is the
/// first maximiser; S = f(X) - f(X_0) - N.
inline DecompositionResult decompose_pl(const PLConvex& f, const SemimartingalePath& path, double tol = 0.0) {
  if (f.dim() != path.dim()) throw InvalidInput("decompose_pl: function and path differ in dimension");
  auto shared = std::make_shared<const PLConvex>(f);
  const Selection sel{"min_index_pl",
                      [shared, tol](const Vector& x) -> Vector { return shared->piece(shared->active_index(x, tol)).beta; }};
  return decompose(ConvexOracle::from_pl(f), path, sel);
}

/// max_j |f(x_j) - f(x_0) - (n_j + s_j)|.
inline double identity_error(const DecompositionResult& r, const ConvexOracle& f, const SemimartingalePath& path) {
  const double f0 = f.eval(path.point(0));
  double worst = 0.0;
  for (std::size_t j = 0; j < path.size(); ++j)
    worst = std::max(worst, std::abs(f.eval(path.point(j)) - f0 - (r.n.values[j] + r.s[j])));
  return worst;
}

/// Running int <beta_active(X), dA> for the min-index selection.
inline std::vector<double> pl_drift_part(const PLConvex& f, const SemimartingalePath& path) {
  std::vector<double> out(path.size(), 0.0);
  double acc = 0.0;
  for (std::size_t j = 0; j + 1 < path.size(); ++j) {
    const auto r = static_cast<Eigen::Index>(j);
    const Vector& beta = f.piece(f.active_index(path.point(j))).beta;
    acc += beta.dot((path.a().row(r + 1) - path.a().row(r)).transpose());
    out[j + 1] = acc;
  }
  return out;
}

/// For two pieces: y v z = (|z - y| + y + z) / 2 with y = l_0(X), z = l_1(X).
/// Expanding |W| for W = l_1(X) - l_0(X) by the discrete Tanaka formula
/// (sgn(0) = -1 sends ties to piece 0, the min-index rule) gives
///   S - int beta dA = L^0(W) / 2
/// step by step. Returns the largest pathwise gap.
inline double tanaka_identity_gap(const PLConvex& f, const SemimartingalePath& path, const DecompositionResult& r) {
  if (f.size() != 2) throw InvalidInput("tanaka_identity_gap: needs exactly two pieces");
  std::vector<double> w(path.size());
  for (std::size_t j = 0; j < path.size(); ++j) {
    const Vector x = path.point(j);
    w[j] = f.piece(1)(x) - f.piece(0)(x);
  }
  const auto local = local_time_tanaka(w, 0.0);
  const auto drift = pl_drift_part(f, path);
  double worst = 0.0;
  for (std::size_t j = 0; j < path.size(); ++j)
    worst = std::max(worst, std::abs(r.s[j] - drift[j] - 0.5 * local[j]));
  return worst;
}

struct FlatnessReport {
  bool ok = false;
  bool flat = true;
  bool monotone = true;
  std::size_t qualifying_steps = 0;
  double max_flat_increment = 0.0;  ///< largest |dS| on a step away from all coincidences
  double max_decrease = 0.0;
  double monotone_tol = 0.0;
};

/// Margin 4 sqrt(dt) |beta_i - beta_j|_max: a step that starts and ends
/// farther than this from every coincidence set would need an 8-sigma move
/// to cross one. For |x| this is 8 sqrt(dt).
inline double default_flatness_margin(const PLConvex& f, const TimeGrid& grid) {
  return 4.0 * std::sqrt(grid.max_dt()) * std::max(f.slope_spread(), 1e-300);
}

/// The local-time part S - int beta dA must not move on any step where every
/// pair of pieces stays more than `margin` apart at both endpoints, and it
/// must be nondecreasing up to 2 max|dx| max|beta|.
inline FlatnessReport residual_flatness_check(const DecompositionResult& r, const PLConvex& f,
                                              const SemimartingalePath& path, double margin) {
  if (!(margin > 0.0)) throw InvalidInput("residual_flatness_check: margin must be positive");
  const auto drift = pl_drift_part(f, path);
  auto min_gap = [&](std::size_t j) {
    const Vector x = path.point(j);
    double g = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < f.size(); ++a)
      for (std::size_t b = a + 1; b < f.size(); ++b) g = std::min(g, std::abs(f.piece(a)(x) - f.piece(b)(x)));
    return g;
  };
  double max_step = 0.0;
  for (std::size_t j = 0; j + 1 < path.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    max_step = std::max(max_step, (path.x().row(row + 1) - path.x().row(row)).norm());
  }
  FlatnessReport rep;
  rep.monotone_tol = 2.0 * max_step * f.max_slope();
  std::vector<double> gaps(path.size());
  for (std::size_t j = 0; j < path.size(); ++j) gaps[j] = min_gap(j);
  for (std::size_t j = 0; j + 1 < path.size(); ++j) {
    const double inc = (r.s[j + 1] - drift[j + 1]) - (r.s[j] - drift[j]);
    rep.max_decrease = std::max(rep.max_decrease, -inc);
    if (gaps[j] > margin && gaps[j + 1] > margin) {
      ++rep.qualifying_steps;
      rep.max_flat_increment = std::max(rep.max_flat_increment, std::abs(inc));
    }
  }
  rep.flat = rep.max_flat_increment <= 1e-9;
  rep.monotone = rep.max_decrease <= rep.monotone_tol;
  rep.ok = rep.flat && rep.monotone;
  return rep;
}

// ---------------------------------------------------------------------------
// Convergence curves

enum class CurveKind { smoothing, perturbation };

struct ConvergenceCurve {
  std::vector<double> params;
  std::vector<double> errors;   ///< estimated H^2 distances
  std::vector<double> stderrs;  ///< bootstrap standard errors
  CurveKind kind = CurveKind::smoothing;

  /// point_{j+1} <= point_j + slack * stderr_{j+1} for all j.
  bool decreasing(double slack = 2.0) const {
    for (std::size_t j = 0; j + 1 < errors.size(); ++j)
      if (errors[j + 1] > errors[j] + slack * stderrs[j + 1]) return false;
    return true;
  }
};

/// Curve CSV: `param,error,stderr`.
inline void write_curve_csv(std::ostream& out, const ConvergenceCurve& c) {
  const auto old_precision = out.precision(17);
  out << "param,error,stderr\n";
  for (std::size_t j = 0; j < c.params.size(); ++j) out << c.params[j] << ',' << c.errors[j] << ',' << c.stderrs[j] << '\n';
  out.precision(old_precision);
}

namespace detail {

/// sqrt(mean) per column of per-path values, with bootstrap errors that
/// reuse one set of resamples for every column.
inline void root_mean_curve(const std::vector<std::vector<double>>& per_path, ConvergenceCurve& curve,
                            std::uint64_t seed) {
  const std::size_t n_paths = per_path.size();
  const std::size_t n_params = curve.params.size();
  for (std::size_t c = 0; c < n_params; ++c) {
    auto stat = [&](auto&& idx) {
      double acc = 0.0;
      std::size_t count = 0;
      for (std::size_t i : idx) {
        acc += per_path[i][c];
        ++count;
      }
      return std::sqrt(acc / static_cast<double>(count));
    };
    std::vector<std::size_t> all(n_paths);
    for (std::size_t i = 0; i < n_paths; ++i) all[i] = i;
    curve.errors.push_back(stat(all));
    curve.stderrs.push_back(
        n_paths > 1 ? bootstrap_stderr(n_paths, [&](std::span<const std::size_t> idx) { return stat(idx); }, seed) : 0.0);
  }
}

}  // namespace detail

/// For each level n, the H^2 norm of int_0^T (grad f_n - subgrad f)(X~) dM~
/// with T the exit time of X~ from the ball of radius r, estimated through
/// E[sum_j <h_j, dM~_j>^2] (the bracket of the integral) and square-rooted.
inline ConvergenceCurve smoothing_convergence_experiment(const ConvexOracle& f, const Ensemble& ensemble,
                                                         double epsilon, std::span<const int> n_levels, double r,
                                                         const Selection& sel, unsigned workers = 0,
                                                         std::uint64_t bootstrap_seed = 0) {
  if (n_levels.empty()) throw InvalidInput("smoothing experiment: no levels");
  for (std::size_t k = 0; k < n_levels.size(); ++k) {
    if (n_levels[k] < 1) throw InvalidInput("smoothing experiment: levels must be >= 1");
    if (k > 0 && n_levels[k] <= n_levels[k - 1]) throw InvalidInput("smoothing experiment: levels must increase");
  }
  if (!(r > 0.0)) throw InvalidInput("smoothing experiment: radius must be positive");
  if (ensemble.dim() != f.dim()) throw InvalidInput("smoothing experiment: dimension mismatch");
  if (ensemble.size() < 2) throw InsufficientData("smoothing experiment: need at least two paths");

  std::vector<SmoothedConvex> smoothed;
  for (int n : n_levels) smoothed.emplace_back(f, n);

  const auto per_path = parallel_map<std::vector<double>>(
      ensemble.size(),
      [&](std::size_t i) {
        const PerturbedPath pp = ensemble.perturbed(i, epsilon);
        const std::size_t stop = stop_at_exit(pp.result, r).index;
        const PathMatrix& x = pp.result.x();
        const PathMatrix& m = pp.result.m();
        std::vector<double> acc(smoothed.size(), 0.0);
        for (std::size_t j = 0; j < stop; ++j) {
          const auto row = static_cast<Eigen::Index>(j);
          const Vector xj = x.row(row).transpose();
          const Vector dm = (m.row(row + 1) - m.row(row)).transpose();
          const Vector g = sel(xj);
          for (std::size_t c = 0; c < smoothed.size(); ++c) {
            const double inc = (smoothed[c].grad(xj) - g).dot(dm);
            acc[c] += inc * inc;
          }
        }
        return acc;
      },
      workers);

  ConvergenceCurve curve;
  curve.kind = CurveKind::smoothing;
  for (int n : n_levels) curve.params.push_back(n);
  detail::root_mean_curve(per_path, curve, bootstrap_seed);
  return curve;
}

struct ConditionReport {
  double epsilon = 0.0;
  double e1 = 0.0;  ///< E sup_{t<=T} |f(X~) - f(X)|
  double e2 = 0.0;  ///< E sup_{t<=T} |N~|
  double e3 = 0.0;  ///< E int_0^T |dS~|
  double e1_se = 0.0, e2_se = 0.0, e3_se = 0.0;
  double sup_b = 0.0;     ///< E sup_{t<=T} |B|
  double sup_b_se = 0.0;
  double c_bound = 0.0;   ///< largest |subgrad f(X~)| seen before T
  double k_bound = 0.0;   ///< empirical Lipschitz constant on the ball of radius r'
  std::size_t n_paths = 0;
};

/// Monte Carlo estimates of the three perturbation conditions with
/// T = T_r(X) ^ T~_{r'}(X~), plus the empirical bounds C_{r'} and K_{r'}.
inline ConditionReport condition_estimates(const ConvexOracle& f, const Ensemble& ensemble, double epsilon, double r,
                                           double r_prime, const Selection& sel, unsigned workers = 0) {
  if (!(r > 0.0) || !(r_prime > r)) throw InvalidInput("condition_estimates: need r' > r > 0");
  if (!(epsilon >= 0.0)) throw InvalidInput("condition_estimates: epsilon must be >= 0");
  if (ensemble.dim() != f.dim()) throw InvalidInput("condition_estimates: dimension mismatch");
  if (ensemble.size() < 2) throw InsufficientData("condition_estimates: need at least two paths");

  struct PathStats {
    double e1, e2, e3, sup_b, c;
  };
  const auto stats = parallel_map<PathStats>(
      ensemble.size(),
      [&](std::size_t i) {
        const SemimartingalePath base = ensemble.path(i);
        const PathMatrix b = ensemble.noise(i);
        const PerturbedPath pp = perturb_with(base, epsilon, b);
        const std::size_t stop =
            min_of({stop_at_exit(base, r), stop_at_exit(pp.result, r_prime)}).index;
        const PathMatrix h = integrand(sel, pp.result.x());
        const IntegralPath n = ito_integral(h, pp.result.m(), pp.result.grid_ptr(), sel.label, stop);
        PathStats s{0.0, 0.0, 0.0, 0.0, 0.0};
        const double f0 = f.eval(pp.result.point(0));
        double prev_s = 0.0;
        for (std::size_t j = 0; j <= stop; ++j) {
          const double ft = f.eval(pp.result.point(j));
          s.e1 = std::max(s.e1, std::abs(ft - f.eval(base.point(j))));
          s.e2 = std::max(s.e2, std::abs(n.values[j]));
          s.sup_b = std::max(s.sup_b, b.row(static_cast<Eigen::Index>(j)).norm());
          const double sj = ft - f0 - n.values[j];
          if (j > 0) s.e3 += std::abs(sj - prev_s);
          prev_s = sj;
          if (j < stop) s.c = std::max(s.c, h.row(static_cast<Eigen::Index>(j)).norm());
        }
        return s;
      },
      workers);

  ConditionReport rep;
  rep.epsilon = epsilon;
  rep.n_paths = stats.size();
  auto summarize = [&](auto field, double& value, double& se) {
    std::vector<double> v;
    v.reserve(stats.size());
    for (const auto& s : stats) v.push_back(field(s));
    value = mean(v);
    se = standard_error(v);
  };
  summarize([](const PathStats& s) { return s.e1; }, rep.e1, rep.e1_se);
  summarize([](const PathStats& s) { return s.e2; }, rep.e2, rep.e2_se);
  summarize([](const PathStats& s) { return s.e3; }, rep.e3, rep.e3_se);
  summarize([](const PathStats& s) { return s.sup_b; }, rep.sup_b, rep.sup_b_se);
  for (const auto& s : stats) rep.c_bound = std::max(rep.c_bound, s.c);
  Stream rng(ensemble.seed(), StreamTag::oracle, 0);
  rep.k_bound = empirical_lipschitz(f, r_prime, 256, rng);
  return rep;
}

struct EpsilonCurve {
  ConvergenceCurve curve;
  /// Mean brackets per eps: int h~^2 d<M~>, int h^2 d<M>, int h~ h d<M~, M>.
  std::vector<double> perturbed_term, base_term, cross_term;
};

/// For each eps, the H^2 distance between int_0^T subgrad f(X~) dM~ and
/// int_0^{T_r} subgrad f(X) dM (T = T_r ^ T~_{r'}), from the bracket of the
/// difference. The noise B is shared across eps.
inline EpsilonCurve epsilon_convergence_experiment(const ConvexOracle& f, const Ensemble& ensemble,
                                                   std::span<const double> eps_schedule, double r, double r_prime,
                                                   const Selection& sel, unsigned workers = 0,
                                                   std::uint64_t bootstrap_seed = 0) {
  require_decreasing(eps_schedule, "epsilon experiment");
  if (!(r > 0.0) || !(r_prime > r)) throw InvalidInput("epsilon experiment: need r' > r > 0");
  if (ensemble.dim() != f.dim()) throw InvalidInput("epsilon experiment: dimension mismatch");
  if (ensemble.size() < 2) throw InsufficientData("epsilon experiment: need at least two paths");
  const std::size_t n_eps = eps_schedule.size();

  struct PathTerms {
    std::vector<double> total, perturbed, base, cross;
  };
  const auto terms = parallel_map<PathTerms>(
      ensemble.size(),
      [&](std::size_t i) {
        const SemimartingalePath base = ensemble.path(i);
        const PathMatrix b = ensemble.noise(i);
        const std::size_t stop_base = stop_at_exit(base, r).index;
        const PathMatrix h = integrand(sel, base.x());
        PathTerms t{std::vector<double>(n_eps, 0.0), std::vector<double>(n_eps, 0.0), std::vector<double>(n_eps, 0.0),
                    std::vector<double>(n_eps, 0.0)};
        for (std::size_t e = 0; e < n_eps; ++e) {
          const PerturbedPath pp = perturb_with(base, eps_schedule[e], b);
          const std::size_t stop = min_of({stop_at_exit(base, r), stop_at_exit(pp.result, r_prime)}).index;
          const PathMatrix ht = integrand(sel, pp.result.x());
          const PathMatrix& mt = pp.result.m();
          const PathMatrix& m = base.m();
          for (std::size_t j = 0; j < std::max(stop, stop_base); ++j) {
            const auto row = static_cast<Eigen::Index>(j);
            const double tilde = j < stop ? ht.row(row).dot(mt.row(row + 1) - mt.row(row)) : 0.0;
            const double plain = j < stop_base ? h.row(row).dot(m.row(row + 1) - m.row(row)) : 0.0;
            const double diff = tilde - plain;
            t.total[e] += diff * diff;
            t.perturbed[e] += tilde * tilde;
            t.base[e] += plain * plain;
            t.cross[e] += tilde * plain;
          }
        }
        return t;
      },
      workers);

  EpsilonCurve out;
  out.curve.kind = CurveKind::perturbation;
  out.curve.params.assign(eps_schedule.begin(), eps_schedule.end());
  std::vector<std::vector<double>> totals;
  totals.reserve(terms.size());
  for (const auto& t : terms) totals.push_back(t.total);
  detail::root_mean_curve(totals, out.curve, bootstrap_seed);
  for (std::size_t e = 0; e < n_eps; ++e) {
    double p = 0.0, q = 0.0, c = 0.0;
    for (const auto& t : terms) {
      p += t.perturbed[e];
      q += t.base[e];
      c += t.cross[e];
    }
    const auto n = static_cast<double>(terms.size());
    out.perturbed_term.push_back(p / n);
    out.base_term.push_back(q / n);
    out.cross_term.push_back(c / n);
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end verification

struct VerifySettings {
  ProcessRecipe recipe;
  std::size_t n_paths = 1000;
  std::uint64_t seed = 1;
  double horizon = 1.0;
  std::vector<std::size_t> steps{1u << 10, 1u << 12, 1u << 14};  ///< increasing; each divides the last
  double max_tv_growth = 1.25;
  MartingaleThresholds thresholds{};
  unsigned workers = 0;
};

struct VerificationReport {
  std::string selection_label;
  MartingaleTestReport martingale;
  std::vector<std::size_t> steps;
  std::vector<double> tv_means;     ///< E sum |dS| per grid
  std::vector<double> tv_growth;    ///< tv_means[l+1] / tv_means[l]
  double s_terminal_mean = 0.0;     ///< on the finest grid
  double s_terminal_se = 0.0;
  bool tv_bounded = false;
  bool verdict = false;
};

/// Builds N = int subgrad f(X) dM per path, tests N for the martingale
/// property on the finest grid, and checks that the discrete total variation
/// of S = f(X) - f(X_0) - N settles under grid refinement (a martingale
/// residual would grow by about 2 for every 4x refinement).
inline VerificationReport verify_decomposition(const ConvexOracle& f, const VerifySettings& cfg, const Selection& sel) {
  if (cfg.n_paths < kMinMartingalePaths)
    throw InsufficientData("verify_decomposition: need at least " + std::to_string(kMinMartingalePaths) + " paths");
  if (cfg.steps.empty()) throw InvalidInput("verify_decomposition: no grids");
  if (cfg.recipe.dim != f.dim()) throw InvalidInput("verify_decomposition: dimension mismatch");
  const std::size_t finest = cfg.steps.back();
  for (std::size_t l = 0; l < cfg.steps.size(); ++l) {
    if (cfg.steps[l] == 0 || finest % cfg.steps[l] != 0)
      throw InvalidInput("verify_decomposition: every grid must divide the finest");
    if (l > 0 && cfg.steps[l] <= cfg.steps[l - 1]) throw InvalidInput("verify_decomposition: grids must refine");
  }
  const Ensemble ensemble(cfg.recipe, make_grid(cfg.horizon, finest), cfg.n_paths, cfg.seed);
  const auto checkpoints = default_checkpoints(cfg.horizon);

  struct PathOut {
    std::vector<double> tv;
    std::vector<double> at_checkpoints;
    double s_terminal = 0.0;
  };
  const auto outs = parallel_map<PathOut>(
      cfg.n_paths,
      [&](std::size_t i) {
        const SemimartingalePath fine = ensemble.path(i);
        PathOut o;
        for (std::size_t steps : cfg.steps) {
          const SemimartingalePath path = fine.coarsen(finest / steps);
          const DecompositionResult r = decompose(f, path, sel);
          o.tv.push_back(total_variation(r.s));
          if (steps == finest) {
            for (double t : checkpoints) o.at_checkpoints.push_back(r.n.values[path.grid().index_at(t)]);
            o.s_terminal = r.s.back();
          }
        }
        return o;
      },
      cfg.workers);

  VerificationReport rep;
  rep.selection_label = sel.label;
  rep.steps = cfg.steps;
  Eigen::MatrixXd values(static_cast<Eigen::Index>(cfg.n_paths), static_cast<Eigen::Index>(checkpoints.size()));
  std::vector<double> s_terminal;
  for (std::size_t p = 0; p < outs.size(); ++p) {
    for (std::size_t k = 0; k < checkpoints.size(); ++k)
      values(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(k)) = outs[p].at_checkpoints[k];
    s_terminal.push_back(outs[p].s_terminal);
  }
  rep.martingale = martingale_test(values, checkpoints, cfg.thresholds);
  for (std::size_t l = 0; l < cfg.steps.size(); ++l) {
    double acc = 0.0;
    for (const auto& o : outs) acc += o.tv[l];
    rep.tv_means.push_back(acc / static_cast<double>(outs.size()));
  }
  rep.tv_bounded = true;
  for (std::size_t l = 0; l + 1 < rep.tv_means.size(); ++l) {
    const double growth = rep.tv_means[l] > 0.0 ? rep.tv_means[l + 1] / rep.tv_means[l] : 1.0;
    rep.tv_growth.push_back(growth);
    if (growth >= cfg.max_tv_growth) rep.tv_bounded = false;
  }
  rep.s_terminal_mean = mean(s_terminal);
  rep.s_terminal_se = standard_error(s_terminal);
  rep.verdict = rep.martingale.verdict && rep.tv_bounded;
  return rep;
}

}  // namespace itolab

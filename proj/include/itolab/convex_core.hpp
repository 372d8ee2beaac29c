#pragma once

// Convex analysis on R^d: max-of-affine functions with their exact
// subdifferential structure, general convex oracles, one-sided directional
// derivatives, the subgradient inequality, Moreau smoothing, and the two
// distinguished subgradient selections (min-index and Gaussian-mollified).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "itolab/errors.hpp"
#include "itolab/rng.hpp"

namespace itolab {

using Vector = Eigen::VectorXd;

inline Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

/// start * 2^-k for k = 0 .. terms-1.
inline std::vector<double> geometric_schedule(double start, int terms = 12) {
  if (!(start > 0.0) || terms < 1) throw InvalidInput("geometric_schedule: need start > 0 and terms >= 1");
  std::vector<double> out(static_cast<std::size_t>(terms));
  for (int k = 0; k < terms; ++k) out[static_cast<std::size_t>(k)] = std::ldexp(start, -k);
  return out;
}

inline void require_decreasing(std::span<const double> schedule, std::string_view name) {
  if (schedule.empty()) throw InvalidInput(std::string(name) + ": empty schedule");
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    if (!(schedule[k] > 0.0) || !std::isfinite(schedule[k]))
      throw InvalidInput(std::string(name) + ": schedule entries must be positive and finite");
    if (k > 0 && !(schedule[k] < schedule[k - 1]))
      throw InvalidInput(std::string(name) + ": schedule must be strictly decreasing");
  }
}

// ---------------------------------------------------------------------------
// Piecewise-linear convex functions

/// l(x) = alpha + <beta, x>
struct AffinePiece {
  double alpha = 0.0;
  Vector beta;

  double operator()(const Vector& x) const { return alpha + beta.dot(x); }
};

/// f(x) = max_i l_i(x). Pieces keep their order; ties resolve to the
/// smallest index, which fixes the partition of R^d into the sets where each
/// piece is the first maximiser. Indices are 0-based.
class PLConvex {
 public:
  explicit PLConvex(std::vector<AffinePiece> pieces) : pieces_(std::move(pieces)) {
    if (pieces_.empty()) throw InvalidInput("PLConvex: need at least one piece");
    dim_ = static_cast<int>(pieces_.front().beta.size());
    if (dim_ < 1) throw InvalidInput("PLConvex: dimension must be >= 1");
    for (const auto& p : pieces_) {
      if (p.beta.size() != dim_) throw InvalidInput("PLConvex: pieces disagree on dimension");
      if (!std::isfinite(p.alpha) || !p.beta.allFinite())
        throw InvalidInput("PLConvex: non-finite coefficient");
    }
  }

  int dim() const { return dim_; }
  std::size_t size() const { return pieces_.size(); }
  const std::vector<AffinePiece>& pieces() const { return pieces_; }
  const AffinePiece& piece(std::size_t i) const { return pieces_.at(i); }

  double eval(const Vector& x) const {
    check(x);
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& p : pieces_) best = std::max(best, p(x));
    return best;
  }

  /// Smallest i with l_i(x) >= max_j l_j(x) - tol.
  std::size_t active_index(const Vector& x, double tol = 0.0) const {
    if (tol < 0.0) throw InvalidInput("active_index: tol must be >= 0");
    const double top = eval(x);
    for (std::size_t i = 0; i < pieces_.size(); ++i)
      if (pieces_[i](x) >= top - tol) return i;
    return 0;  // unreachable: the maximiser itself qualifies
  }

  std::vector<std::size_t> active_set(const Vector& x, double tol = 0.0) const {
    if (tol < 0.0) throw InvalidInput("active_set: tol must be >= 0");
    const double top = eval(x);
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pieces_.size(); ++i)
      if (pieces_[i](x) >= top - tol) out.push_back(i);
    return out;
  }

  /// Gradients of the pieces active at x; the subdifferential is their hull.
  std::vector<Vector> subdifferential(const Vector& x, double tol = 0.0) const {
    std::vector<Vector> out;
    for (std::size_t i : active_set(x, tol)) out.push_back(pieces_[i].beta);
    return out;
  }

  /// max_i |beta_i|: a global Lipschitz constant.
  double max_slope() const {
    double m = 0.0;
    for (const auto& p : pieces_) m = std::max(m, p.beta.norm());
    return m;
  }

  /// max_{i,j} |beta_i - beta_j|.
  double slope_spread() const {
    double m = 0.0;
    for (const auto& a : pieces_)
      for (const auto& b : pieces_) m = std::max(m, (a.beta - b.beta).norm());
    return m;
  }

 private:
  void check(const Vector& x) const {
    if (x.size() != dim_)
      throw InvalidInput("PLConvex: point has dimension " + std::to_string(x.size()) + ", expected " +
                         std::to_string(dim_));
  }

  std::vector<AffinePiece> pieces_;
  int dim_ = 0;
};

inline double eval_pl(const PLConvex& f, const Vector& x) { return f.eval(x); }
inline std::size_t active_index(const PLConvex& f, const Vector& x, double tol = 0.0) {
  return f.active_index(x, tol);
}
inline std::vector<Vector> subdifferential_pl(const PLConvex& f, const Vector& x, double tol = 0.0) {
  return f.subdifferential(x, tol);
}

inline nlohmann::json to_json(const PLConvex& f) {
  nlohmann::json pieces = nlohmann::json::array();
  for (const auto& p : f.pieces()) {
    pieces.push_back({{"alpha", p.alpha}, {"beta", std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size())}});
  }
  return {{"dim", f.dim()}, {"pieces", pieces}};
}

inline PLConvex pl_from_json(const nlohmann::json& j) {
  try {
    const int dim = j.at("dim").get<int>();
    std::vector<AffinePiece> pieces;
    for (const auto& item : j.at("pieces")) {
      const auto beta = item.at("beta").get<std::vector<double>>();
      if (static_cast<int>(beta.size()) != dim) throw InvalidInput("PLConvex: beta length differs from dim");
      pieces.push_back({item.at("alpha").get<double>(), Eigen::Map<const Vector>(beta.data(), dim)});
    }
    return PLConvex(std::move(pieces));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("PLConvex: malformed description: ") + e.what());
  }
}

/// Structured-text form: {"dim": d, "pieces": [{"alpha": a, "beta": [...]}, ...]}.
/// Numbers are written in shortest round-trip form, so parse(serialize(f))
/// reproduces every coefficient bit for bit.
inline std::string serialize(const PLConvex& f) { return to_json(f).dump(2); }

inline PLConvex parse_pl(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(std::string("PLConvex: ") + e.what());
  }
  return pl_from_json(j);
}

/// k pieces with alpha ~ U(-alpha_range, alpha_range), beta entries ~ U(-beta_range, beta_range).
inline PLConvex random_pl(int dim, std::size_t k, Stream& rng, double beta_range = 2.0, double alpha_range = 1.0) {
  std::vector<AffinePiece> pieces;
  for (std::size_t i = 0; i < k; ++i) {
    Vector beta(dim);
    for (int j = 0; j < dim; ++j) beta[j] = rng.uniform(-beta_range, beta_range);
    pieces.push_back({rng.uniform(-alpha_range, alpha_range), beta});
  }
  return PLConvex(std::move(pieces));
}

// ---------------------------------------------------------------------------
// General convex functions

/// A convex function given by evaluation and a subgradient selection.
/// Optional extras: a bound C_r on |subgrad| over the ball of radius r, and
/// an exact proximal map used by smoothing.
class ConvexOracle {
 public:
  using EvalFn = std::function<double(const Vector&)>;
  using SubgradFn = std::function<Vector(const Vector&)>;
  using BoundFn = std::function<double(double)>;
  using ProxFn = std::function<Vector(const Vector&, double)>;

  ConvexOracle(int dim, EvalFn eval, SubgradFn subgrad, std::string label = "custom")
      : dim_(dim), eval_(std::move(eval)), subgrad_(std::move(subgrad)), label_(std::move(label)) {
    if (dim_ < 1) throw InvalidInput("ConvexOracle: dimension must be >= 1");
    if (!eval_ || !subgrad_) throw InvalidInput("ConvexOracle: eval and subgrad are required");
  }

  /// Min-index selection beta_{active_index(x)}.
  static ConvexOracle from_pl(PLConvex f, std::string label = "pl") {
    auto shared = std::make_shared<const PLConvex>(std::move(f));
    ConvexOracle o(
        shared->dim(), [shared](const Vector& x) { return shared->eval(x); },
        [shared](const Vector& x) -> Vector { return shared->piece(shared->active_index(x)).beta; },
        std::move(label));
    o.pl_ = shared;
    const double slope = shared->max_slope();
    o.bound_ = [slope](double) { return slope; };
    return o;
  }

  /// |x| as max(-x, x); the min-index selection gives sgn with sgn(0) = -1.
  static ConvexOracle abs() {
    return from_pl(PLConvex({{0.0, vec({-1.0})}, {0.0, vec({1.0})}}), "abs");
  }

  /// max(0, x); selection 0 at the kink.
  static ConvexOracle positive_part() {
    return from_pl(PLConvex({{0.0, vec({0.0})}, {0.0, vec({1.0})}}), "positive_part");
  }

  static ConvexOracle affine(double alpha, Vector beta) {
    const std::string label = "affine";
    return from_pl(PLConvex({{alpha, std::move(beta)}}), label);
  }

  /// (c/2)|x|^2 with its exact proximal map.
  static ConvexOracle quadratic(double curvature, int dim = 1) {
    if (!(curvature >= 0.0)) throw InvalidInput("quadratic: curvature must be >= 0");
    ConvexOracle o(
        dim, [curvature](const Vector& x) { return 0.5 * curvature * x.squaredNorm(); },
        [curvature](const Vector& x) -> Vector { return curvature * x; }, "quadratic");
    o.bound_ = [curvature](double r) { return curvature * r; };
    o.prox_ = [curvature](const Vector& x, double n) -> Vector { return (n / (n + curvature)) * x; };
    return o;
  }

  int dim() const { return dim_; }
  const std::string& label() const { return label_; }

  double eval(const Vector& x) const {
    check(x);
    return eval_(x);
  }
  Vector subgrad(const Vector& x) const {
    check(x);
    return subgrad_(x);
  }

  std::optional<double> lipschitz_bound(double r) const {
    if (!bound_) return std::nullopt;
    return bound_(r);
  }

  const PLConvex* pl() const { return pl_.get(); }
  const ProxFn* prox() const { return prox_ ? &prox_ : nullptr; }

  ConvexOracle with_lipschitz_hint(BoundFn bound) const {
    ConvexOracle o = *this;
    o.bound_ = std::move(bound);
    return o;
  }
  ConvexOracle with_prox(ProxFn prox) const {
    ConvexOracle o = *this;
    o.prox_ = std::move(prox);
    return o;
  }
  ConvexOracle with_label(std::string label) const {
    ConvexOracle o = *this;
    o.label_ = std::move(label);
    return o;
  }

 private:
  void check(const Vector& x) const {
    if (x.size() != dim_)
      throw InvalidInput("ConvexOracle '" + label_ + "': point has dimension " + std::to_string(x.size()) +
                         ", expected " + std::to_string(dim_));
  }

  int dim_;
  EvalFn eval_;
  SubgradFn subgrad_;
  std::string label_;
  BoundFn bound_;
  ProxFn prox_;
  std::shared_ptr<const PLConvex> pl_;
};

// ---------------------------------------------------------------------------
// Directional derivatives and the subgradient inequality

struct DirectionalDerivative {
  double value = 0.0;  ///< quotient at the smallest step: an upper bound on Df(x)[y]
  double gap = 0.0;    ///< difference between the last two quotients
  std::vector<double> quotients;
};

/// (f(x + l y) - f(x)) / l along a decreasing step schedule. For convex f the
/// quotients are nonincreasing as l shrinks; an increase beyond
/// tol * max(1, |q|) means the oracle is not convex.
inline DirectionalDerivative directional_derivative(const ConvexOracle& f, const Vector& x, const Vector& y,
                                                    std::span<const double> lambdas, double tol = 1e-9) {
  if (y.size() != f.dim()) throw InvalidInput("directional_derivative: direction has wrong dimension");
  if (y.norm() == 0.0) throw InvalidInput("directional_derivative: direction must be nonzero");
  require_decreasing(lambdas, "directional_derivative");
  const double fx = f.eval(x);
  DirectionalDerivative out;
  out.quotients.reserve(lambdas.size());
  for (double lambda : lambdas) {
    const double q = (f.eval(x + lambda * y) - fx) / lambda;
    if (!out.quotients.empty()) {
      const double prev = out.quotients.back();
      const double excess = q - prev;
      if (excess > tol * std::max(1.0, std::abs(prev)))
        throw ConvexityViolation("difference quotients increase as the step shrinks", excess);
    }
    out.quotients.push_back(q);
  }
  out.value = out.quotients.back();
  out.gap = out.quotients.size() > 1 ? out.quotients[out.quotients.size() - 2] - out.value : 0.0;
  return out;
}

inline DirectionalDerivative directional_derivative(const ConvexOracle& f, const Vector& x, const Vector& y) {
  const auto lambdas = geometric_schedule(1.0);
  return directional_derivative(f, x, y, lambdas);
}

struct SubgradientCheck {
  bool ok = true;
  double worst_margin = std::numeric_limits<double>::infinity();  ///< min_y Df(x)[y] - <g, y>
  Vector worst_direction;
};

/// Sampled subgradient inequality: Df(x)[y] >= <g, y> - tol for every y in dirs.
inline SubgradientCheck subgradient_check(const ConvexOracle& f, const Vector& x, const Vector& g,
                                          std::span<const Vector> dirs, double tol,
                                          std::span<const double> lambdas = {}) {
  if (dirs.empty()) throw InvalidInput("subgradient_check: need at least one direction");
  if (g.size() != f.dim()) throw InvalidInput("subgradient_check: candidate has wrong dimension");
  std::vector<double> fallback;
  if (lambdas.empty()) {
    fallback = geometric_schedule(1.0);
    lambdas = fallback;
  }
  SubgradientCheck report;
  for (const auto& y : dirs) {
    const double margin = directional_derivative(f, x, y, lambdas).value - g.dot(y);
    if (margin < report.worst_margin) {
      report.worst_margin = margin;
      report.worst_direction = y;
    }
  }
  report.ok = report.worst_margin >= -tol;
  return report;
}

inline std::vector<Vector> random_directions(int dim, std::size_t count, Stream& rng) {
  std::vector<Vector> dirs;
  dirs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) dirs.push_back(rng.unit_vector(dim));
  return dirs;
}

// ---------------------------------------------------------------------------
// Moreau smoothing: f_n(x) = inf_z f(z) + (n/2)|x - z|^2

namespace detail {

/// Upper envelope of 1-d lines, slopes strictly increasing left to right.
struct LineEnvelope {
  std::vector<double> slopes, intercepts, breaks;  // breaks[p] separates line p and p+1

  explicit LineEnvelope(const PLConvex& f) {
    std::vector<std::pair<double, double>> lines;  // (slope, intercept)
    for (const auto& p : f.pieces()) lines.emplace_back(p.beta[0], p.alpha);
    std::sort(lines.begin(), lines.end(), [](const auto& a, const auto& b) {
      return a.first < b.first || (a.first == b.first && a.second > b.second);
    });
    for (const auto& [s, a] : lines) {
      if (!slopes.empty() && slopes.back() == s) continue;  // parallel and lower
      while (slopes.size() >= 2) {
        const std::size_t m = slopes.size();
        const double s1 = slopes[m - 2], a1 = intercepts[m - 2];
        const double s2 = slopes[m - 1], a2 = intercepts[m - 1];
        // Line 2 never wins if line 3 overtakes line 1 no later than line 2 does.
        if ((a1 - a) * (s2 - s1) <= (a1 - a2) * (s - s1)) {
          slopes.pop_back();
          intercepts.pop_back();
        } else {
          break;
        }
      }
      slopes.push_back(s);
      intercepts.push_back(a);
    }
    for (std::size_t p = 0; p + 1 < slopes.size(); ++p)
      breaks.push_back((intercepts[p] - intercepts[p + 1]) / (slopes[p + 1] - slopes[p]));
  }

  /// Exact minimiser of f(z) + (n/2)(x - z)^2: on each linear stretch the
  /// minimiser is x - s/n clamped to the stretch; the best stretch wins.
  double prox(const PLConvex& f, double x, double n) const {
    const double inf = std::numeric_limits<double>::infinity();
    double best_z = x, best_phi = inf;
    for (std::size_t p = 0; p < slopes.size(); ++p) {
      const double lo = p == 0 ? -inf : breaks[p - 1];
      const double hi = p + 1 == slopes.size() ? inf : breaks[p];
      const double z = std::clamp(x - slopes[p] / n, lo, hi);
      const double phi = f.eval(vec({z})) + 0.5 * n * (x - z) * (x - z);
      if (phi < best_phi) {
        best_phi = phi;
        best_z = z;
      }
    }
    return best_z;
  }
};

/// Exact proximal map of a PL function in any dimension. At the optimum,
/// z = x - (1/n) sum_S lambda_i beta_i with l_i(z) equal on the active set S,
/// and S can be taken affinely independent (|S| <= d+1). Each such S gives a
/// nonsingular KKT system; every candidate z satisfies phi(z) >= phi*, so the
/// smallest phi over all candidates is the optimum.
struct SubsetProx {
  struct System {
    std::vector<std::size_t> members;
    Eigen::FullPivLU<Eigen::MatrixXd> lu;
  };
  std::vector<System> systems;

  SubsetProx(const PLConvex& f, double n) {
    const std::size_t k = f.size();
    const std::size_t max_size = std::min<std::size_t>(k, static_cast<std::size_t>(f.dim()) + 1);
    std::vector<std::size_t> members;
    std::function<void(std::size_t)> recurse = [&](std::size_t start) {
      if (!members.empty()) add(f, n, members);
      if (members.size() == max_size) return;
      for (std::size_t i = start; i < k; ++i) {
        members.push_back(i);
        recurse(i + 1);
        members.pop_back();
      }
    };
    recurse(0);
  }

  void add(const PLConvex& f, double n, const std::vector<std::size_t>& members) {
    const auto s = static_cast<Eigen::Index>(members.size());
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(s + 1, s + 1);
    for (Eigen::Index a = 0; a < s; ++a) {
      for (Eigen::Index b = 0; b < s; ++b)
        kkt(a, b) = f.piece(members[a]).beta.dot(f.piece(members[b]).beta) / n;
      kkt(a, s) = 1.0;
      kkt(s, a) = 1.0;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    lu.setThreshold(1e-10);
    if (lu.isInvertible()) systems.push_back({members, std::move(lu)});
  }

  Vector prox(const PLConvex& f, const Vector& x, double n) const {
    Vector best = x;
    double best_phi = std::numeric_limits<double>::infinity();
    for (const auto& sys : systems) {
      const auto s = static_cast<Eigen::Index>(sys.members.size());
      Eigen::VectorXd rhs(s + 1);
      for (Eigen::Index a = 0; a < s; ++a) rhs[a] = f.piece(sys.members[a])(x);
      rhs[s] = 1.0;
      const Eigen::VectorXd sol = sys.lu.solve(rhs);
      Vector z = x;
      for (Eigen::Index a = 0; a < s; ++a) z -= (sol[a] / n) * f.piece(sys.members[a]).beta;
      const double phi = f.eval(z) + 0.5 * n * (x - z).squaredNorm();
      if (phi < best_phi) {
        best_phi = phi;
        best = std::move(z);
      }
    }
    return best;
  }
};

}  // namespace detail

enum class ProxMethod { pl_closed_form_1d, pl_kkt_enumeration, oracle_prox, bisection_1d, subgradient_descent };

/// Moreau envelope of a convex oracle at level n >= 1. Convex, C^1 with an
/// n-Lipschitz gradient n (x - prox(x)), below f, and nondecreasing in n.
class SmoothedConvex {
 public:
  SmoothedConvex(ConvexOracle base, int level) : base_(std::move(base)), level_(level) {
    if (level_ < 1) throw InvalidInput("smooth: level must be >= 1");
    if (const PLConvex* f = base_.pl()) {
      if (f->dim() == 1) {
        method_ = ProxMethod::pl_closed_form_1d;
        envelope_ = std::make_shared<const detail::LineEnvelope>(*f);
      } else {
        method_ = ProxMethod::pl_kkt_enumeration;
        subsets_ = std::make_shared<const detail::SubsetProx>(*f, static_cast<double>(level_));
      }
    } else if (base_.prox()) {
      method_ = ProxMethod::oracle_prox;
    } else if (base_.dim() == 1) {
      method_ = ProxMethod::bisection_1d;
    } else {
      method_ = ProxMethod::subgradient_descent;
    }
  }

  const ConvexOracle& base() const { return base_; }
  int level() const { return level_; }
  ProxMethod method() const { return method_; }

  Vector prox(const Vector& x) const {
    const double n = level_;
    switch (method_) {
      case ProxMethod::pl_closed_form_1d:
        return vec({envelope_->prox(*base_.pl(), checked(x)[0], n)});
      case ProxMethod::pl_kkt_enumeration:
        return subsets_->prox(*base_.pl(), checked(x), n);
      case ProxMethod::oracle_prox:
        return (*base_.prox())(checked(x), n);
      case ProxMethod::bisection_1d:
        return vec({bisect(checked(x)[0], n)});
      case ProxMethod::subgradient_descent:
        return descend(checked(x), n);
    }
    return x;
  }

  double eval(const Vector& x) const {
    const Vector z = prox(x);
    return base_.eval(z) + 0.5 * level_ * (x - z).squaredNorm();
  }

  Vector grad(const Vector& x) const { return static_cast<double>(level_) * (x - prox(x)); }

  /// f_n as a convex oracle of its own (gradient as the selection).
  ConvexOracle as_oracle() const {
    auto self = std::make_shared<const SmoothedConvex>(*this);
    return ConvexOracle(
        base_.dim(), [self](const Vector& x) { return self->eval(x); },
        [self](const Vector& x) { return self->grad(x); },
        base_.label() + "_moreau_" + std::to_string(level_));
  }

 private:
  const Vector& checked(const Vector& x) const {
    if (x.size() != base_.dim()) throw InvalidInput("smooth: point has wrong dimension");
    return x;
  }

  /// Root of the nondecreasing map z -> g(z) + n (z - x).
  double bisect(double x, double n) const {
    auto h = [&](double z) { return base_.subgrad(vec({z}))[0] + n * (z - x); };
    double radius = std::abs(base_.subgrad(vec({x}))[0]) / n + 1.0;
    double lo = x - radius, hi = x + radius;
    for (int i = 0; h(lo) > 0.0; ++i) {
      if (i > 200) throw SmoothingFailure("smooth: cannot bracket the proximal point", radius);
      radius *= 2.0;
      lo = x - radius;
    }
    for (int i = 0; h(hi) < 0.0; ++i) {
      if (i > 200) throw SmoothingFailure("smooth: cannot bracket the proximal point", radius);
      radius *= 2.0;
      hi = x + radius;
    }
    for (int i = 0; i < 400; ++i) {
      const double mid = lo + 0.5 * (hi - lo);
      if (mid <= lo || mid >= hi) break;
      if (h(mid) < 0.0) lo = mid;
      else hi = mid;
    }
    auto phi = [&](double z) { return base_.eval(vec({z})) + 0.5 * n * (x - z) * (x - z); };
    return phi(lo) <= phi(hi) ? lo : hi;
  }

  /// Projected subgradient descent with step 1/(n k). For any s in the
  /// subdifferential of phi at z, |z - z*| <= |s| / n, which certifies the
  /// returned iterate.
  Vector descend(const Vector& x, double n) const {
    constexpr int kIterations = 1000;
    constexpr double kResidualTol = 1e-8;
    const auto bound = base_.lipschitz_bound(x.norm() + 1.0);
    Vector z = x, best = x;
    double best_residual = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= kIterations; ++k) {
      const Vector s = base_.subgrad(z) + n * (z - x);
      const double residual = s.norm() / n;
      if (residual < best_residual) {
        best_residual = residual;
        best = z;
      }
      if (residual <= kResidualTol * 1e-3) break;
      z -= s / (n * k);
      if (bound) {
        const double radius = *bound / n;
        const double dist = (z - x).norm();
        if (dist > radius && dist > 0.0) z = x + (radius / dist) * (z - x);
      }
    }
    if (best_residual > kResidualTol)
      throw SmoothingFailure("smooth: proximal subgradient descent did not converge", best_residual);
    return best;
  }

  ConvexOracle base_;
  int level_;
  ProxMethod method_ = ProxMethod::subgradient_descent;
  std::shared_ptr<const detail::LineEnvelope> envelope_;
  std::shared_ptr<const detail::SubsetProx> subsets_;
};

inline SmoothedConvex smooth(const ConvexOracle& f, int n) { return SmoothedConvex(f, n); }

// ---------------------------------------------------------------------------
// Subgradient selections

struct MollifiedEstimate {
  Vector value;                     ///< estimate at the smallest theta
  std::vector<Vector> estimates;    ///< one per theta, same Gaussian draws throughout
  std::vector<double> std_errors;   ///< largest coordinate standard error per theta
  bool converged = true;
  double last_jump = 0.0;           ///< |estimate_K - estimate_{K-1}|_inf
};

/// Monte Carlo mean of subgrad(x + theta N), N standard Gaussian in R^d.
inline MollifiedEstimate mollified_subgradient(const ConvexOracle& f, const Vector& x,
                                               std::span<const double> thetas, int samples, Stream& rng) {
  if (samples < 1) throw InvalidInput("mollified_subgradient: samples must be >= 1");
  require_decreasing(thetas, "mollified_subgradient");
  if (x.size() != f.dim()) throw InvalidInput("mollified_subgradient: point has wrong dimension");
  const int d = f.dim();
  std::vector<Vector> draws;
  draws.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) draws.push_back(rng.gaussian_vector(d));

  MollifiedEstimate out;
  for (double theta : thetas) {
    Vector sum = Vector::Zero(d), sum_sq = Vector::Zero(d);
    for (const auto& noise : draws) {
      const Vector g = f.subgrad(x + theta * noise);
      sum += g;
      sum_sq += g.cwiseProduct(g);
    }
    const Vector m = sum / samples;
    double se = 0.0;
    if (samples > 1) {
      const Vector var = ((sum_sq - samples * m.cwiseProduct(m)) / (samples - 1)).cwiseMax(0.0);
      se = std::sqrt(var.maxCoeff() / samples);
    }
    out.estimates.push_back(m);
    out.std_errors.push_back(se);
  }
  out.value = out.estimates.back();
  if (out.estimates.size() > 1) {
    const std::size_t k = out.estimates.size() - 1;
    out.last_jump = (out.estimates[k] - out.estimates[k - 1]).cwiseAbs().maxCoeff();
    out.converged = out.last_jump <= 3.0 * (out.std_errors[k] + out.std_errors[k - 1]) + 1e-12;
  }
  return out;
}

/// The theta -> 0 limit of the mollified selection for a PL function. Off the
/// kinks it is the unique gradient; on a kink, x + theta N eventually lies in
/// the region of the active piece maximising <beta, N>, so the limit is the
/// Gaussian average of that piece's gradient.
inline Vector mollified_limit_pl(const PLConvex& f, const Vector& x, int samples, Stream& rng) {
  const auto active = f.active_set(x);
  if (active.size() == 1) return f.piece(active.front()).beta;
  Vector sum = Vector::Zero(f.dim());
  for (int s = 0; s < samples; ++s) {
    const Vector noise = rng.gaussian_vector(f.dim());
    std::size_t best = active.front();
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t i : active) {
      const double v = f.piece(i).beta.dot(noise);
      if (v > best_val) {
        best_val = v;
        best = i;
      }
    }
    sum += f.piece(best).beta;
  }
  return sum / samples;
}

namespace detail {

/// Euclidean projection onto the probability simplex.
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, tau = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    cumulative += u[i];
    const double t = (cumulative - 1.0) / static_cast<double>(i + 1);
    if (u[i] - t > 0.0) tau = t;
  }
  return (v.array() - tau).cwiseMax(0.0).matrix();
}

/// Distance from g to the convex hull of the given points.
inline double hull_distance(const std::vector<Vector>& points, const Vector& g) {
  if (points.empty()) return std::numeric_limits<double>::infinity();
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : points) best = std::min(best, (p - g).norm());
  if (best == 0.0 || points.size() == 1) return best;
  const auto k = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd basis(g.size(), k);
  for (Eigen::Index i = 0; i < k; ++i) basis.col(i) = points[static_cast<std::size_t>(i)];
  const double lipschitz = std::max((basis.transpose() * basis).trace(), 1e-300);
  Eigen::VectorXd lambda = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
  Eigen::VectorXd momentum = lambda;
  double t = 1.0;
  for (int it = 0; it < 5000; ++it) {
    const Eigen::VectorXd grad = basis.transpose() * (basis * momentum - g);
    const Eigen::VectorXd next = project_simplex(momentum - grad / lipschitz);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    momentum = next + ((t - 1.0) / t_next) * (next - lambda);
    lambda = next;
    t = t_next;
  }
  return std::min(best, (basis * lambda - g).norm());
}

}  // namespace detail

struct DirectionalLimit {
  Vector value;                 ///< subgrad(x + eps y) at the smallest eps
  std::vector<Vector> sequence;
  double oscillation = 0.0;     ///< max_{k >= K/2} |g_k - g_K|_inf
  bool member = false;          ///< limit lies in the subdifferential at x
  double membership_distance = 0.0;
};

/// lim_{eps -> 0} subgrad(x + eps y). Throws LimitFailure when the tail of
/// the sequence is not Cauchy within cauchy_tol. Membership of the limit in
/// the subdifferential at x is decided by a hull-distance solve for PL
/// functions and by the sampled subgradient inequality otherwise.
inline DirectionalLimit directional_limit(const ConvexOracle& f, const Vector& x, const Vector& y,
                                          std::span<const double> eps, double cauchy_tol = 1e-9) {
  require_decreasing(eps, "directional_limit");
  if (y.size() != f.dim() || x.size() != f.dim()) throw InvalidInput("directional_limit: wrong dimension");
  if (y.norm() == 0.0) throw InvalidInput("directional_limit: direction must be nonzero");
  const Vector u = y / y.norm();

  DirectionalLimit out;
  for (double e : eps) out.sequence.push_back(f.subgrad(x + e * u));
  out.value = out.sequence.back();
  for (std::size_t k = out.sequence.size() / 2; k < out.sequence.size(); ++k)
    out.oscillation = std::max(out.oscillation, (out.sequence[k] - out.value).cwiseAbs().maxCoeff());
  if (out.oscillation > cauchy_tol)
    throw LimitFailure("directional subgradients do not settle along the ray", out.oscillation);

  if (const PLConvex* pl = f.pl()) {
    // Pieces active at x + eps_min u are active at x up to eps_min * spread.
    const double tol = eps.back() * pl->slope_spread() + 1e-12 * (1.0 + std::abs(pl->eval(x)));
    out.membership_distance = detail::hull_distance(pl->subdifferential(x, tol), out.value);
    out.member = out.membership_distance <= 1e-9;
  } else {
    Stream rng(0, StreamTag::oracle, 0);
    const auto dirs = random_directions(f.dim(), 32, rng);
    const auto check = subgradient_check(f, x, out.value, dirs, 1e-6);
    out.membership_distance = std::max(0.0, -check.worst_margin);
    out.member = check.ok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distance of uniform convergence on compact sets

struct RhoDistance {
  double rho = 0.0;
  std::vector<double> per_k;
  double tail_bound = 0.0;  ///< 2^-K, the most the omitted terms can add
};

/// rho(f, g) = sum_k 2^-k rho_k with rho_k = s_k / (1 + s_k), s_k the sup of
/// |f - g| over the lattice of spacing 1/grid_density inside |x| <= k.
inline RhoDistance estimate_rho(const ConvexOracle& f, const ConvexOracle& g, int K, int grid_density) {
  if (K < 1) throw InvalidInput("estimate_rho: K must be >= 1");
  if (grid_density < 1) throw InvalidInput("estimate_rho: grid_density must be >= 1");
  if (f.dim() != g.dim()) throw InvalidInput("estimate_rho: oracles differ in dimension");
  const int d = f.dim();
  const int per_side = K * grid_density;
  std::vector<double> sup(static_cast<std::size_t>(K), 0.0);
  std::vector<int> idx(static_cast<std::size_t>(d), -per_side);
  Vector x(d);
  for (;;) {
    for (int i = 0; i < d; ++i) x[i] = static_cast<double>(idx[static_cast<std::size_t>(i)]) / grid_density;
    const double radius = x.norm();
    if (radius <= K) {
      const double gap = std::abs(f.eval(x) - g.eval(x));
      for (int k = std::max(1, static_cast<int>(std::ceil(radius))); k <= K; ++k)
        sup[static_cast<std::size_t>(k - 1)] = std::max(sup[static_cast<std::size_t>(k - 1)], gap);
    }
    int c = 0;
    while (c < d && idx[static_cast<std::size_t>(c)] == per_side) idx[static_cast<std::size_t>(c++)] = -per_side;
    if (c == d) break;
    ++idx[static_cast<std::size_t>(c)];
  }
  RhoDistance out;
  for (int k = 1; k <= K; ++k) {
    const double s = sup[static_cast<std::size_t>(k - 1)];
    out.per_k.push_back(s / (1.0 + s));
    out.rho += std::ldexp(out.per_k.back(), -k);
  }
  out.tail_bound = std::ldexp(1.0, -K);
  return out;
}

/// Largest pairwise slope |f(x) - f(y)| / |x - y| over points drawn uniformly
/// from the ball of the given radius: an empirical Lipschitz constant there.
inline double empirical_lipschitz(const ConvexOracle& f, double radius, std::size_t points, Stream& rng) {
  const int d = f.dim();
  std::vector<Vector> xs;
  std::vector<double> fx;
  for (std::size_t i = 0; i < points; ++i) {
    const double r = radius * std::pow(rng.uniform(), 1.0 / d);
    xs.push_back(r * rng.unit_vector(d));
    fx.push_back(f.eval(xs.back()));
  }
  double best = 0.0;
  for (std::size_t i = 0; i < points; ++i)
    for (std::size_t j = i + 1; j < points; ++j) {
      const double dist = (xs[i] - xs[j]).norm();
      if (dist > 1e-9) best = std::max(best, std::abs(fx[i] - fx[j]) / dist);
    }
  return best;
}

}  // namespace itolab

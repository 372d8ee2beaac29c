#include <catch_amalgamated.hpp>

#include <cmath>

#include "itolab/convex_core.hpp"
#include "oracles.hpp"

using namespace itolab;
using Catch::Approx;

namespace {

PLConvex abs_pl() { return PLConvex({{0.0, vec({-1.0})}, {0.0, vec({1.0})}}); }

ConvexOracle max_x_2x() { return ConvexOracle::from_pl(PLConvex({{0.0, vec({1.0})}, {0.0, vec({2.0})}})); }

ConvexOracle max_coords() {
  return ConvexOracle::from_pl(PLConvex({{0.0, vec({1.0, 0.0})}, {0.0, vec({0.0, 1.0})}}));
}

/// |x| without the PL structure, so generic code paths get used.
ConvexOracle opaque_abs() {
  return ConvexOracle(
      1, [](const Vector& x) { return std::abs(x[0]); }, [](const Vector& x) { return vec({x[0] <= 0.0 ? -1.0 : 1.0}); },
      "opaque_abs");
}

Vector ball_point(int d, double radius, Stream& rng) {
  return radius * std::pow(rng.uniform(), 1.0 / d) * rng.unit_vector(d);
}

}  // namespace

TEST_CASE("eval_pl examples", "[convex_core]") {
  CHECK(eval_pl(abs_pl(), vec({-2.0})) == 2.0);
  const PLConvex hinge({{0.0, vec({0.0})}, {-1.0, vec({1.0})}});
  CHECK(eval_pl(hinge, vec({3.0})) == 2.0);
  const PLConvex three({{0.0, vec({1.0, 1.0})}, {0.0, vec({2.0, 0.0})}, {0.0, vec({0.0, 0.0})}});
  CHECK(eval_pl(three, vec({1.0, -3.0})) == 2.0);
  CHECK_THROWS_AS(eval_pl(three, vec({1.0})), InvalidInput);
}

TEST_CASE("PLConvex rejects malformed pieces", "[convex_core]") {
  CHECK_THROWS_AS(PLConvex({}), InvalidInput);
  CHECK_THROWS_AS(PLConvex({{0.0, vec({1.0})}, {0.0, vec({1.0, 2.0})}}), InvalidInput);
  CHECK_THROWS_AS(PLConvex({{NAN, vec({1.0})}}), InvalidInput);
}

TEST_CASE("active_index uses the smallest maximiser", "[convex_core]") {
  // Pieces are 0-based: index 0 is the first piece.
  CHECK(active_index(abs_pl(), vec({-2.0})) == 0);
  CHECK(active_index(abs_pl(), vec({0.0})) == 0);
  CHECK(active_index(abs_pl(), vec({0.5})) == 1);
  const PLConvex same({{1.0, vec({2.0})}, {1.0, vec({2.0})}, {1.0, vec({2.0})}});
  Stream rng(3, StreamTag::sampling, 0);
  for (int i = 0; i < 20; ++i) CHECK(active_index(same, vec({rng.uniform(-5, 5)})) == 0);
  CHECK_THROWS_AS(active_index(abs_pl(), vec({0.0}), -1.0), InvalidInput);
}

TEST_CASE("directional_derivative examples", "[convex_core]") {
  const auto f = ConvexOracle::abs();
  CHECK(directional_derivative(f, vec({0.0}), vec({1.0})).value == Approx(1.0).margin(1e-12));
  CHECK(directional_derivative(f, vec({0.0}), vec({-1.0})).value == Approx(1.0).margin(1e-12));
  CHECK(directional_derivative(max_x_2x(), vec({0.0}), vec({1.0})).value == Approx(2.0).margin(1e-12));
}

TEST_CASE("directional_derivative flags non-convex oracles", "[convex_core]") {
  const ConvexOracle concave(
      1, [](const Vector& x) { return -x[0] * x[0]; }, [](const Vector& x) { return vec({-2.0 * x[0]}); }, "concave");
  CHECK_THROWS_AS(directional_derivative(concave, vec({0.0}), vec({1.0})), ConvexityViolation);
  const std::vector<double> increasing{0.1, 0.2};
  CHECK_THROWS_AS(directional_derivative(ConvexOracle::abs(), vec({0.0}), vec({1.0}), increasing), InvalidInput);
}

TEST_CASE("subgradient_check examples", "[convex_core]") {
  const auto f = ConvexOracle::abs();
  const std::vector<Vector> dirs{vec({1.0}), vec({-1.0})};
  CHECK(subgradient_check(f, vec({0.0}), vec({0.5}), dirs, 1e-9).ok);
  const auto bad = subgradient_check(f, vec({0.0}), vec({2.0}), dirs, 1e-9);
  CHECK_FALSE(bad.ok);
  CHECK(bad.worst_margin == Approx(-1.0).margin(1e-12));
  CHECK(bad.worst_direction[0] == 1.0);
  CHECK(subgradient_check(f, vec({1.0}), vec({1.0}), dirs, 1e-9).ok);
  CHECK_THROWS_AS(subgradient_check(f, vec({0.0}), vec({0.0}), std::vector<Vector>{}, 1e-9), InvalidInput);
}

TEST_CASE("subdifferential_pl examples", "[convex_core]") {
  auto at0 = subdifferential_pl(abs_pl(), vec({0.0}));
  REQUIRE(at0.size() == 2);
  CHECK(at0[0][0] == -1.0);
  CHECK(at0[1][0] == 1.0);
  auto at3 = subdifferential_pl(abs_pl(), vec({3.0}));
  REQUIRE(at3.size() == 1);
  CHECK(at3[0][0] == 1.0);
  auto corner = subdifferential_pl(*max_coords().pl(), vec({0.0, 0.0}));
  REQUIRE(corner.size() == 2);
  CHECK(corner[0] == vec({1.0, 0.0}));
  CHECK(corner[1] == vec({0.0, 1.0}));
}

TEST_CASE("PL functions survive a JSON round trip", "[convex_core]") {
  Stream rng(5, StreamTag::sampling, 0);
  const PLConvex f = random_pl(3, 5, rng);
  const PLConvex g = parse_pl(serialize(f));
  REQUIRE(g.size() == f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    CHECK(g.piece(i).alpha == f.piece(i).alpha);
    CHECK(g.piece(i).beta == f.piece(i).beta);
  }
  CHECK_THROWS_AS(parse_pl(R"({"dim": 1, "pieces": [{"alpha": 0, "beta": [1, 2]}]})"), InvalidInput);
}

TEST_CASE("Moreau envelope examples", "[convex_core]") {
  const auto f1 = smooth(ConvexOracle::abs(), 1);
  CHECK(f1.method() == ProxMethod::pl_closed_form_1d);
  CHECK(f1.eval(vec({0.0})) == 0.0);
  CHECK(f1.grad(vec({0.0}))[0] == 0.0);
  // Independent grid minimisation, frozen before the envelope code existed.
  CHECK(oracles::abs_envelope_grid(2.0, 1.0) == Approx(oracles::frozen::abs_envelope_n1_at_2).margin(1e-9));
  CHECK(f1.eval(vec({2.0})) == Approx(oracles::frozen::abs_envelope_n1_at_2).margin(1e-12));
  CHECK(f1.grad(vec({2.0}))[0] == Approx(1.0).margin(1e-12));
  for (int n : {1, 3, 10})
    for (double x : {-3.0, -0.4, 0.05, 0.7, 2.5})
      CHECK(smooth(ConvexOracle::abs(), n).eval(vec({x})) ==
            Approx(oracles::abs_envelope_grid(x, n)).margin(1e-9));
}

TEST_CASE("Moreau envelope of an affine function is a downward shift", "[convex_core]") {
  // inf_z a + <b, z> + (n/2)|x - z|^2 = a + <b, x> - |b|^2 / (2n).
  const Vector beta = vec({1.5, -0.5});
  const auto f = ConvexOracle::affine(0.25, beta);
  Stream rng(9, StreamTag::sampling, 0);
  for (int n : {1, 4, 64}) {
    const auto fn = smooth(f, n);
    for (int i = 0; i < 20; ++i) {
      const Vector x = ball_point(2, 3.0, rng);
      CHECK(fn.eval(x) == Approx(f.eval(x) - beta.squaredNorm() / (2.0 * n)).margin(1e-12));
      CHECK((fn.grad(x) - beta).norm() <= 1e-12);
    }
  }
}

TEST_CASE("every proximal method agrees on |x|", "[convex_core]") {
  const auto closed = smooth(ConvexOracle::abs(), 4);
  const auto generic = smooth(opaque_abs(), 4);
  CHECK(generic.method() == ProxMethod::bisection_1d);
  for (double x : {-2.0, -0.26, -0.1, 0.0, 0.2, 0.25, 1.0})
    CHECK(generic.eval(vec({x})) == Approx(closed.eval(vec({x}))).margin(1e-12));
}

TEST_CASE("KKT enumeration matches subgradient descent in d = 2", "[convex_core]") {
  Stream rng(11, StreamTag::sampling, 0);
  const PLConvex pl = random_pl(2, 5, rng);
  const auto exact = smooth(ConvexOracle::from_pl(pl), 3);
  const ConvexOracle opaque(
      2, [pl](const Vector& x) { return pl.eval(x); },
      [pl](const Vector& x) { return pl.piece(pl.active_index(x)).beta; }, "opaque");
  CHECK(exact.method() == ProxMethod::pl_kkt_enumeration);
  int certified = 0;
  for (int i = 0; i < 20; ++i) {
    const Vector x = ball_point(2, 2.0, rng);
    const double e = exact.eval(x);
    // Brute-force: the envelope is below phi(z) for every z, with equality at the prox.
    const Vector z = exact.prox(x);
    for (int k = 0; k < 50; ++k) {
      const Vector w = z + 0.05 * rng.gaussian_vector(2);
      CHECK(pl.eval(w) + 1.5 * (x - w).squaredNorm() >= e - 1e-12);
    }
    const auto descent = smooth(opaque.with_lipschitz_hint([&](double) { return pl.max_slope(); }), 3);
    CHECK(descent.method() == ProxMethod::subgradient_descent);
    try {
      const double approx = descent.eval(x);
      CHECK(approx == Approx(e).margin(1e-6));
      ++certified;
    } catch (const SmoothingFailure& err) {
      // A prox on a kink cannot be certified by one selected subgradient;
      // the failure must carry the residual.
      CHECK(err.residual() > 1e-8);
    }
  }
  CHECK(certified >= 10);
}

TEST_CASE("quadratic oracle uses its exact prox", "[convex_core]") {
  const auto q = ConvexOracle::quadratic(2.0, 1);
  const auto fn = smooth(q, 6);
  CHECK(fn.method() == ProxMethod::oracle_prox);
  // Envelope of (c/2) x^2 is (cn / (2(n + c))) x^2 with gradient cn x / (n + c).
  CHECK(fn.grad(vec({1.0}))[0] == Approx(2.0 * 6.0 / 8.0).margin(1e-12));
  CHECK(fn.eval(vec({1.0})) == Approx(0.5 * 12.0 / 8.0).margin(1e-12));
}

TEST_CASE("mollified subgradient examples", "[convex_core]") {
  const auto thetas = geometric_schedule(1e-4);
  Stream rng(21, StreamTag::mollifier, 0);
  const auto at0 = mollified_subgradient(ConvexOracle::abs(), vec({0.0}), thetas, 4096, rng);
  CHECK(std::abs(at0.value[0]) <= 4.0 * at0.std_errors.back());
  const auto hinge = mollified_subgradient(ConvexOracle::positive_part(), vec({0.0}), thetas, 4096, rng);
  CHECK(std::abs(hinge.value[0] - 0.5) <= 4.0 * hinge.std_errors.back());
  const auto off = mollified_subgradient(ConvexOracle::abs(), vec({0.3}), thetas, 256, rng);
  CHECK(off.value[0] == 1.0);
  CHECK(off.converged);
}

TEST_CASE("mollified subgradient tracks 2 Phi(x / theta) - 1 along theta", "[convex_core]") {
  const std::vector<double> thetas{1.0, 0.5, 0.3, 0.2, 0.1, 0.05};
  Stream rng(22, StreamTag::mollifier, 0);
  const auto est = mollified_subgradient(ConvexOracle::abs(), vec({0.3}), thetas, 20000, rng);
  for (std::size_t k = 0; k < thetas.size(); ++k) {
    const double expect = oracles::mollified_sign(0.3, thetas[k]);
    CHECK(std::abs(est.estimates[k][0] - expect) <= 4.0 * est.std_errors[k] + 1e-8);
  }
}

TEST_CASE("directional limit examples", "[convex_core]") {
  const auto eps = geometric_schedule(1e-4);
  const auto f = ConvexOracle::abs();
  const auto right = directional_limit(f, vec({0.0}), vec({1.0}), eps);
  CHECK(right.value[0] == 1.0);
  CHECK(right.member);
  CHECK(directional_limit(f, vec({0.0}), vec({-1.0}), eps).value[0] == -1.0);
  const auto corner = directional_limit(max_coords(), vec({0.0, 0.0}), vec({1.0, -1.0}) / std::sqrt(2.0), eps);
  CHECK(corner.value == vec({1.0, 0.0}));
  CHECK(corner.member);
  CHECK(corner.membership_distance <= 1e-12);
}

TEST_CASE("directional limit reports a sequence that never settles", "[convex_core]") {
  // Not a subgradient selection of anything: alternates sign with log2 of the offset.
  const ConvexOracle wild(
      1, [](const Vector& x) { return std::abs(x[0]); },
      [](const Vector& x) {
        const int k = static_cast<int>(std::floor(std::log2(std::abs(x[0]) + 1e-300)));
        return vec({k % 2 == 0 ? 1.0 : -1.0});
      },
      "wild");
  try {
    directional_limit(wild, vec({0.0}), vec({1.0}), geometric_schedule(1.0));
    FAIL("expected LimitFailure");
  } catch (const LimitFailure& e) {
    CHECK(e.oscillation() == Approx(2.0));
  }
}

TEST_CASE("estimate_rho examples", "[convex_core]") {
  const auto f = ConvexOracle::abs();
  const auto same = estimate_rho(f, f, 4, 8);
  CHECK(same.rho == 0.0);
  const ConvexOracle shifted(
      1, [](const Vector& x) { return std::abs(x[0]) + 1.0; }, [](const Vector& x) { return vec({x[0] <= 0 ? -1.0 : 1.0}); });
  const auto r = estimate_rho(f, shifted, 4, 8);
  for (double pk : r.per_k) CHECK(pk == 0.5);
  CHECK(r.rho == Approx(0.5 * (1.0 - std::ldexp(1.0, -4))).margin(1e-15));
  CHECK(r.tail_bound == std::ldexp(1.0, -4));
}

TEST_CASE("max-dominance over sampled points", "[convex_core][property]") {
  Stream rng(31, StreamTag::sampling, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + trial % 3;
    const PLConvex f = random_pl(d, 2 + trial % 5, rng);
    for (int i = 0; i < 50; ++i) {
      const Vector x = ball_point(d, 4.0, rng);
      for (const auto& p : f.pieces()) CHECK(f.eval(x) >= p(x));
    }
  }
}

TEST_CASE("directional derivative: homogeneity and the two-sided bound", "[convex_core][property]") {
  Stream rng(32, StreamTag::sampling, 0);
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + trial % 3;
    const auto f = ConvexOracle::from_pl(random_pl(d, 4, rng));
    for (int i = 0; i < 50; ++i) {
      const Vector x = ball_point(d, 2.0, rng);
      const Vector y = rng.unit_vector(d);
      const double lambda = rng.uniform(1e-3, 2.0);
      const auto base = directional_derivative(f, x, y);
      const auto scaled = directional_derivative(f, x, Vector(lambda * y));
      const auto back = directional_derivative(f, x, Vector(-y));
      // Converged quotients only: the last two agree.
      if (base.gap <= 1e-12 && scaled.gap <= 1e-12) {
        CHECK(scaled.value == Approx(lambda * base.value).margin(1e-9));
        ++checked;
      }
      CHECK(base.value >= -back.value - 1e-9);
    }
  }
  CHECK(checked > 900);
}

TEST_CASE("returned subgradients pass the subgradient inequality", "[convex_core][property]") {
  Stream rng(33, StreamTag::sampling, 0);
  const auto thetas = geometric_schedule(1e-4);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + trial % 3;
    const PLConvex pl = random_pl(d, 4, rng);
    const auto f = ConvexOracle::from_pl(pl);
    for (int i = 0; i < 20; ++i) {
      Vector x = ball_point(d, 2.0, rng);
      if (i % 2 == 1) {  // move onto the coincidence set of pieces 0 and 1
        const Vector diff = pl.piece(0).beta - pl.piece(1).beta;
        x -= (pl.piece(0)(x) - pl.piece(1)(x)) / diff.squaredNorm() * diff;
      }
      const auto dirs = random_directions(d, 32, rng);
      for (const Vector& g : pl.subdifferential(x, 1e-12)) CHECK(subgradient_check(f, x, g, dirs, 1e-6).ok);
      Stream m(33, StreamTag::mollifier, static_cast<std::uint64_t>(trial * 100 + i));
      CHECK(subgradient_check(f, x, mollified_subgradient(f, x, thetas, 256, m).value, dirs, 1e-6).ok);
      const auto lim = directional_limit(f, x, rng.unit_vector(d), thetas);
      CHECK(lim.member);
      CHECK(subgradient_check(f, x, lim.value, dirs, 1e-6).ok);
    }
  }
}

TEST_CASE("Moreau envelopes increase in n and stay below f", "[convex_core][property]") {
  Stream rng(34, StreamTag::sampling, 0);
  const std::vector<int> levels{1, 2, 4, 8, 16, 32, 64};
  for (int trial = 0; trial < 6; ++trial) {
    const int d = 1 + trial % 2;
    const auto f = ConvexOracle::from_pl(random_pl(d, 4, rng));
    std::vector<SmoothedConvex> fs;
    for (int n : levels) fs.emplace_back(f, n);
    for (int i = 0; i < 100; ++i) {
      const Vector x = ball_point(d, 3.0, rng);
      for (std::size_t k = 0; k + 1 < fs.size(); ++k) CHECK(fs[k].eval(x) <= fs[k + 1].eval(x));
      CHECK(fs.back().eval(x) <= f.eval(x));
    }
  }
}

TEST_CASE("smoothed gradient matches central differences", "[convex_core][property]") {
  Stream rng(35, StreamTag::sampling, 0);
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 1 + trial % 2;
    const auto fn = smooth(ConvexOracle::from_pl(random_pl(d, 4, rng)), 1 << (trial % 4));
    for (int i = 0; i < 100; ++i) {
      const Vector x = ball_point(d, 3.0, rng);
      const Vector g = fn.grad(x);
      Vector fd(d);
      for (int c = 0; c < d; ++c) {
        Vector e = Vector::Zero(d);
        e[c] = h;
        fd[c] = (fn.eval(x + e) - fn.eval(x - e)) / (2.0 * h);
      }
      worst = std::max(worst, (fd - g).norm() / std::max(1.0, g.norm()));
    }
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("smoothed gradients are bounded uniformly in n", "[convex_core][property]") {
  Stream rng(36, StreamTag::sampling, 0);
  const double r = 2.0;
  const auto f = ConvexOracle::from_pl(random_pl(2, 5, rng));
  const double c_bound = empirical_lipschitz(f, r + 1.0, 400, rng);
  double worst = 0.0;
  for (int n : {1, 2, 4, 8, 16, 32, 64}) {
    const auto fn = smooth(f, n);
    for (int i = 0; i < 150; ++i) worst = std::max(worst, fn.grad(ball_point(2, r, rng)).norm());
  }
  // Pairwise slopes only approach the steepest gradient through nearly aligned pairs.
  CHECK(worst <= c_bound * (1.0 + 1e-3));
}

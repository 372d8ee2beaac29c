#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "itolab/ito_engine.hpp"
#include "itolab/parallel.hpp"
#include "itolab/path_sim.hpp"
#include "itolab/stats.hpp"
#include "oracles.hpp"

using namespace itolab;
using Catch::Approx;

namespace {

ProcessRecipe bm(int d) {
  ProcessRecipe r;
  r.dim = d;
  return r;
}

PathMatrix column_matrix(const std::vector<double>& v) {
  PathMatrix m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t j = 0; j < v.size(); ++j) m(static_cast<Eigen::Index>(j), 0) = v[j];
  return m;
}

PathMatrix sgn_integrand(const PathMatrix& x) {
  PathMatrix h(x.rows(), 1);
  for (Eigen::Index j = 0; j < x.rows(); ++j) h(j, 0) = sgn(x(j, 0));
  return h;
}

}  // namespace

TEST_CASE("sgn sends zero to -1", "[ito_engine]") {
  CHECK(sgn(0.0) == -1.0);
  CHECK(sgn(-0.0) == -1.0);
  CHECK(sgn(1e-300) == 1.0);
  CHECK(sgn(-3.0) == -1.0);
}

TEST_CASE("ito_integral examples", "[ito_engine]") {
  const auto grid = make_grid(1.0, 128);
  Stream s(1, StreamTag::base_path, 0);
  const PathMatrix m = simulate_bm(*grid, 3, s);
  const PathMatrix ones = PathMatrix::Ones(129, 3);
  const auto sum = ito_integral(ones, m, grid);
  double acc = 0.0;
  for (std::size_t j = 0; j + 1 < sum.values.size(); ++j) {
    acc += (m.row(static_cast<Eigen::Index>(j) + 1) - m.row(static_cast<Eigen::Index>(j))).sum();
    CHECK(sum.values[j + 1] == acc);
  }
  // Telescoping: equals the component sum of m[j] - m[0] up to summation order.
  for (std::size_t j = 0; j < sum.values.size(); ++j)
    CHECK(sum.values[j] == Approx(m.row(static_cast<Eigen::Index>(j)).sum()).margin(1e-12));

  const auto zero = ito_integral(PathMatrix::Zero(129, 3), m, grid);
  for (double v : zero.values) CHECK(v == 0.0);
  CHECK_THROWS_AS(ito_integral(PathMatrix::Ones(129, 2), m, grid), InvalidInput);
  CHECK_THROWS_AS(ito_integral(PathMatrix::Ones(10, 3), m, grid), InvalidInput);
  CHECK_THROWS_AS(ito_integral(ones, m, make_grid(1.0, 64)), InvalidInput);
}

TEST_CASE("ito_integral is adapted and stops cleanly", "[ito_engine]") {
  const auto grid = make_grid(1.0, 16);
  Stream s(2, StreamTag::base_path, 0);
  const PathMatrix m = simulate_bm(*grid, 1, s);
  PathMatrix h = PathMatrix::Ones(17, 1);
  const auto before = ito_integral(h, m, grid);
  h(10, 0) = 99.0;  // only the increment starting at t_10 may notice
  const auto after = ito_integral(h, m, grid);
  for (std::size_t j = 0; j <= 10; ++j) CHECK(after.values[j] == before.values[j]);
  CHECK(after.values[11] != before.values[11]);
  const auto stopped = ito_integral(PathMatrix::Ones(17, 1), m, grid, "", 5);
  for (std::size_t j = 5; j <= 16; ++j) CHECK(stopped.values[j] == before.values[5]);
}

TEST_CASE("ito_integral is linear in the integrand", "[ito_engine][property]") {
  // Dyadic coefficients keep every product exact.
  const auto grid = make_grid(1.0, 256);
  Stream s(3, StreamTag::base_path, 0);
  const PathMatrix m = simulate_bm(*grid, 2, s);
  const PathMatrix h1 = sgn_integrand(m.col(0)).replicate(1, 2);
  PathMatrix h2 = PathMatrix::Ones(257, 2);
  h2.col(1) *= -1.0;
  const double a = 0.5, b = 2.0;
  const auto lhs = ito_integral(PathMatrix(a * h1 + b * h2), m, grid);
  const auto i1 = ito_integral(h1, m, grid), i2 = ito_integral(h2, m, grid);
  for (std::size_t j = 0; j < lhs.values.size(); ++j)
    CHECK(lhs.values[j] == Approx(a * i1.values[j] + b * i2.values[j]).margin(1e-13));
}

TEST_CASE("Ito isometry for a deterministic integrand", "[ito_engine][property]") {
  const auto grid = make_grid(1.0, 256);
  const Ensemble ens(bm(1), grid, 2000, 4);
  PathMatrix h(257, 1);
  double expected = 0.0;
  for (std::size_t j = 0; j < 257; ++j) {
    h(static_cast<Eigen::Index>(j), 0) = std::cos(6.0 * grid->time(j));
    if (j < 256) expected += h(static_cast<Eigen::Index>(j), 0) * h(static_cast<Eigen::Index>(j), 0) * grid->dt(j);
  }
  std::vector<double> terminal;
  for (std::size_t i = 0; i < ens.size(); ++i) terminal.push_back(ito_integral(h, ens.path(i).m(), grid).terminal());
  const double var = variance(terminal);
  const double se = bootstrap_stderr(
      terminal.size(),
      [&](std::span<const std::size_t> idx) {
        std::vector<double> v;
        for (std::size_t i : idx) v.push_back(terminal[i]);
        return variance(v);
      },
      11);
  CHECK(std::abs(var - expected) <= 3.0 * se);
}

TEST_CASE("quadratic variation examples and properties", "[ito_engine]") {
  const auto grid = make_grid(1.0, 1000);
  PathMatrix line(1001, 1);
  for (Eigen::Index j = 0; j <= 1000; ++j) line(j, 0) = grid->time(static_cast<std::size_t>(j));
  CHECK(quadratic_variation(line, grid).terminal() == Approx(1e-3).margin(1e-15));

  Stream s(5, StreamTag::base_path, 0);
  const PathMatrix m = simulate_bm(*grid, 1, s), n = simulate_bm(*grid, 1, s);
  const auto qm = quadratic_variation(m, grid).values, qn = quadratic_variation(n, grid).values;
  for (std::size_t j = 0; j + 1 < qm.size(); ++j) CHECK(qm[j + 1] >= qm[j]);
  const auto mn = quadratic_covariation(m, n), nm = quadratic_covariation(n, m);
  CHECK(mn == nm);
  CHECK(std::abs(mn.back()) <= std::sqrt(qm.back() * qn.back()));
  const auto stopped = quadratic_variation(m, grid, 100).values;
  CHECK(stopped.back() == qm[100]);
}

TEST_CASE("total variation examples", "[ito_engine]") {
  const auto grid = make_grid(1.0, 1000);
  std::vector<double> ramp, vee;
  for (std::size_t j = 0; j <= 1000; ++j) {
    ramp.push_back(grid->time(j));
    vee.push_back(std::abs(grid->time(j) - 0.5));
  }
  CHECK(total_variation(ramp) == Approx(1.0).margin(1e-12));
  CHECK(total_variation(vee) == Approx(1.0).margin(1e-12));
  CHECK(total_variation(column_matrix(ramp)) == Approx(1.0).margin(1e-12));
}

TEST_CASE("total variation of BM grows like sqrt(2 / pi) N sqrt(dt)", "[ito_engine]") {
  // Negative control for finite variation: E|dB| = sqrt(2 dt / pi).
  for (std::size_t steps : {1024u, 4096u, 16384u}) {
    const auto grid = make_grid(1.0, steps);
    std::vector<double> tv;
    for (std::uint64_t i = 0; i < 100; ++i) {
      Stream s(6, StreamTag::base_path, i);
      tv.push_back(total_variation(simulate_bm(*grid, 1, s)));
    }
    const double expected = std::sqrt(2.0 / std::numbers::pi) * std::sqrt(static_cast<double>(steps));
    CHECK(std::abs(mean(tv) - expected) <= 4.0 * standard_error(tv));
  }
}

TEST_CASE("Tanaka local time examples", "[ito_engine]") {
  const auto grid = make_grid(1.0, 1000);
  std::vector<double> away, crossing;
  for (std::size_t j = 0; j <= 1000; ++j) {
    away.push_back(2.0 + std::sin(10.0 * grid->time(j)) * 0.5);
    crossing.push_back(grid->time(j) - 0.5);
  }
  for (double v : local_time_tanaka(away, 0.0)) CHECK(v == Approx(0.0).margin(1e-15));
  const auto lc = local_time_tanaka(crossing, 0.0);
  // One crossing step contributes |x_{j+1}| - |x_j| - sgn(x_j) dx <= 2 |dx|.
  for (double v : lc) CHECK(std::abs(v) <= 2e-3 + 1e-12);
  CHECK(lc.back() > 0.0);

  ProcessRecipe two = bm(2);
  Stream s(7, StreamTag::base_path, 0);
  const auto p2 = build_semimartingale(two, grid, s);
  CHECK_THROWS_AS(local_time_tanaka(p2, 0.0), UnsupportedDimension);
  CHECK_THROWS_AS(local_time_occupation(p2, 0.0, 0.1), UnsupportedDimension);
}

TEST_CASE("Tanaka local time: monotone and flat away from the level", "[ito_engine][property]") {
  const auto grid = make_grid(1.0, 4096);
  const Ensemble ens(bm(1), grid, 200, 8);
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto p = ens.path(i);
    const auto col = column(p.x());
    const auto lt = local_time_tanaka(col, 0.0);
    double max_step = 0.0;
    for (std::size_t j = 0; j + 1 < col.size(); ++j) max_step = std::max(max_step, std::abs(col[j + 1] - col[j]));
    for (std::size_t j = 0; j + 1 < lt.size(); ++j) {
      CHECK(lt[j + 1] >= lt[j] - 1e-9);
      if (std::abs(col[j]) > max_step && std::abs(col[j + 1]) > max_step) CHECK(std::abs(lt[j + 1] - lt[j]) <= 1e-12);
    }
  }
}

TEST_CASE("occupation estimate agrees with Tanaka on BM", "[ito_engine]") {
  const auto grid = make_grid(1.0, 4096);
  const Ensemble ens(bm(1), grid, 2000, 9);
  std::vector<double> tanaka, occ;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto p = ens.path(i);
    tanaka.push_back(local_time_tanaka(p, 0.0).terminal());
    occ.push_back(local_time_occupation(p, 0.0, default_bandwidth(*grid)));
  }
  CHECK(std::abs(mean(tanaka) - oracles::frozen::mean_abs_bm) <= 0.02 + 3.0 * standard_error(tanaka));
  // The bandwidth smooths the peak: a few percent low at 4 sqrt(dt).
  CHECK(std::abs(mean(occ) - mean(tanaka)) <= 0.06 * mean(tanaka));
  std::vector<double> far(100, 5.0);
  CHECK(local_time_occupation(far, 0.0, 1.0) == 0.0);
  CHECK_THROWS_AS(local_time_occupation(far, 0.0, 0.0), InvalidInput);
}

TEST_CASE("H^p norm examples", "[ito_engine]") {
  const auto grid = make_grid(1.0, 4096);
  const PathMatrix zero = PathMatrix::Zero(4097, 1);
  PathMatrix ramp(4097, 1);
  for (Eigen::Index j = 0; j <= 4096; ++j) ramp(j, 0) = grid->time(static_cast<std::size_t>(j));
  const std::vector<SemimartingalePath> zeros(10, SemimartingalePath(grid, vec({0.0}), zero, zero));
  CHECK(hp_norm_estimate(zeros, 2.0).value == 0.0);
  const std::vector<SemimartingalePath> drifts(10, SemimartingalePath(grid, vec({0.0}), zero, ramp));
  for (double p : {1.0, 2.0, 3.5}) CHECK(hp_norm_estimate(drifts, p).value == Approx(1.0).margin(1e-12));

  const Ensemble ens(bm(1), grid, 200, 10);
  std::vector<SemimartingalePath> paths;
  for (std::size_t i = 0; i < ens.size(); ++i) paths.push_back(ens.path(i));
  const auto h2 = hp_norm_estimate(paths, 2.0, 3);
  // <B>_1 has variance 2 dt per path.
  CHECK(h2.value == Approx(1.0).margin(4.0 * std::sqrt(2.0 / 4096.0)));
  CHECK(hp_norm_estimate(paths, 1.0).value <= h2.value);
  CHECK(h2.value <= hp_norm_estimate(paths, 4.0).value);
  CHECK_THROWS_AS(hp_norm_estimate(paths, 0.5), InvalidInput);
}

TEST_CASE("martingale test examples", "[ito_engine]") {
  const auto grid = make_grid(1.0, 1024);
  const Ensemble ens(bm(1), grid, 1000, 12);
  const auto checkpoints = default_checkpoints(1.0);
  std::vector<IntegralPath> brownian, tanaka, drift;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto p = ens.path(i);
    brownian.push_back(ito_integral(PathMatrix::Ones(1025, 1), p.m(), grid));
    tanaka.push_back(ito_integral(sgn_integrand(p.x()), p.m(), grid));
    IntegralPath t{grid, grid->times(), "t"};
    drift.push_back(t);
  }
  CHECK(martingale_test(brownian, checkpoints).verdict);
  CHECK(martingale_test(tanaka, checkpoints).verdict);
  const auto bad = martingale_test(drift, checkpoints);
  CHECK_FALSE(bad.verdict);
  CHECK(std::isinf(bad.max_abs_z));
  const std::vector<IntegralPath> few(brownian.begin(), brownian.begin() + 50);
  CHECK_THROWS_AS(martingale_test(few, checkpoints), InsufficientData);

  std::ostringstream out;
  write_martingale_report(out, martingale_test(tanaka, checkpoints));
  CHECK(out.str().rfind("checkpoint_t,mean_increment,std_error,z\n", 0) == 0);
}

TEST_CASE("martingale test catches a small drift once paths accumulate", "[ito_engine]") {
  // N = B + 0.3 t: z grows like 0.3 sqrt(n_paths / window).
  const auto grid = make_grid(1.0, 256);
  const Ensemble ens(bm(1), grid, 2000, 13);
  const auto checkpoints = default_checkpoints(1.0);
  std::vector<IntegralPath> paths;
  for (std::size_t i = 0; i < ens.size(); ++i) {
    const auto p = ens.path(i);
    IntegralPath n{grid, {}, "drifted"};
    for (std::size_t j = 0; j < p.size(); ++j) n.values.push_back(p.m()(static_cast<Eigen::Index>(j), 0) + 0.3 * grid->time(j));
    paths.push_back(std::move(n));
  }
  CHECK_FALSE(martingale_test(paths, checkpoints).verdict);
}

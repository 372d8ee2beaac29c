#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "itolab/errors.hpp"
#include "itolab/rng.hpp"

namespace itolab {

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw InsufficientData("mean of an empty sample");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Unbiased sample variance.
inline double variance(std::span<const double> xs) {
  if (xs.size() < 2) throw InsufficientData("variance needs at least two values");
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

inline double standard_error(std::span<const double> xs) {
  return std::sqrt(variance(xs) / static_cast<double>(xs.size()));
}

inline double correlation(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw InvalidInput("correlation: bad sample sizes");
  const double mx = mean(xs);
  const double my = mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  // Degenerate (constant) samples carry no correlation signal.
  if (sxx <= 0.0 || syy <= 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

/// Path-level bootstrap: resample indices with replacement and report the
/// standard deviation of statistic(resample).
inline double bootstrap_stderr(std::size_t n_items,
                               const std::function<double(std::span<const std::size_t>)>& statistic,
                               std::uint64_t seed, int resamples = 200) {
  if (n_items < 2) throw InsufficientData("bootstrap needs at least two paths");
  Stream stream(seed, StreamTag::bootstrap, 0);
  std::vector<double> stats(static_cast<std::size_t>(resamples));
  std::vector<std::size_t> idx(n_items);
  for (auto& s : stats) {
    for (auto& i : idx) i = stream.index_below(n_items);
    s = statistic(idx);
  }
  return std::sqrt(variance(stats));
}

}  // namespace itolab

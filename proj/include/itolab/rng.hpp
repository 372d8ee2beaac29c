#pragma once

// Reproducible random streams. Every path owns a stream derived from
// (master seed, purpose tag, path index), so ensembles do not depend on the
// order or the thread in which paths are generated.

#include <array>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace itolab {

/// Purposes get disjoint substreams: perturbation noise never reuses the
/// draws that built the base path.
enum class StreamTag : std::uint64_t {
  base_path = 1,
  perturbation = 2,
  oracle = 3,
  mollifier = 4,
  bootstrap = 5,
  sampling = 6,
};

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Stream {
 public:
  using Engine = std::mt19937_64;

  Stream(std::uint64_t seed, StreamTag tag, std::uint64_t index) {
    std::uint64_t state = splitmix64(seed);
    state = splitmix64(state ^ static_cast<std::uint64_t>(tag));
    state = splitmix64(state ^ index);
    std::array<std::uint32_t, 8> words{};
    for (auto& w : words) {
      state = splitmix64(state);
      w = static_cast<std::uint32_t>(state >> 32);
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  double gaussian() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  std::size_t index_below(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Eigen::VectorXd gaussian_vector(int d) {
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v[i] = gaussian();
    return v;
  }

  /// Uniform on the unit sphere S^{d-1}.
  Eigen::VectorXd unit_vector(int d) {
    for (;;) {
      Eigen::VectorXd v = gaussian_vector(d);
      const double n = v.norm();
      if (n > 1e-12) return v / n;
    }
  }

  Engine& engine() { return engine_; }

 private:
  Engine engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace itolab

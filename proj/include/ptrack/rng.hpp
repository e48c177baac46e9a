#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "ptrack/errors.hpp"

namespace ptrack {

/// splitmix64 finalizer; decorrelates derived seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic random stream. The engine is a standard mt19937_64, but all
/// distributions are hand-rolled so results do not depend on the standard
/// library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix_seed(seed)) {}

  std::uint64_t raw() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached spare, one draw per call).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform index in [0, n) without modulo bias.
  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ParameterError("uniform_index: n must be positive");
    std::uint64_t un = n;
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t v = raw();
    while (v >= limit) v = raw();
    return static_cast<std::size_t>(v % un);
  }

  /// k distinct indices from [0, n), in shuffled order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw ParameterError("sample_without_replacement: k exceeds n");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + uniform_index(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  /// Child stream whose state depends only on (seed, tag), not on how much of
  /// this stream has been consumed.
  Rng fork(std::uint64_t tag) const { return Rng(mix_seed(seed_ ^ mix_seed(tag))); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace ptrack

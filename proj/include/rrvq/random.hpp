#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace rrvq {

/// Deterministic random stream. The engine is the standard-specified
/// mt19937_64; all variate transforms are done here rather than through
/// std distributions so that streams are bit-reproducible across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  /// Derives an independent stream, e.g. one per Monte-Carlo trial, so that
  /// results do not depend on how trials are partitioned.
  static Rng stream(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 mix of (seed, index)
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform on [0,1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0,n).
  int uniform_int(int n) {
    std::uint64_t bound = static_cast<std::uint64_t>(n);
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return static_cast<int>(v % bound);
  }

  /// Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Standard Gumbel noise -log(-log u), with u clamped away from 0 and 1.
  double gumbel() {
    double u = uniform();
    if (u < 1e-20) u = 1e-20;
    if (u > 1.0 - 1e-7) u = 1.0 - 1e-7;
    return -std::log(-std::log(u));
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace rrvq

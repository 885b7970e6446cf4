#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace tgcn {

// Generator id recorded in emitted manifests so runs can be replayed.
inline constexpr const char* kRngName = "splitmix64+mt19937_64/v1";

namespace detail {

// splitmix64 finalizer, used to derive substream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Deterministic 64-bit generator. mt19937_64 output is pinned by the C++
/// standard, and the double / normal conversions below bypass the
/// implementation-defined std::*_distribution classes, so every stream
/// replays bit-exactly across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(detail::mix64(seed)) {}

  /// Independent child stream. Each graph slab / repeat draws from its own
  /// substream, so slabs can be produced in any order (or in parallel)
  /// without changing the result.
  static Rng substream(std::uint64_t seed, std::uint64_t stream) {
    return Rng(detail::mix64(seed ^ detail::mix64(stream + 1)));
  }

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n), n >= 1.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Standard normal via Box-Muller. Two uniforms per draw, no cached spare,
  /// so the draw count per call is fixed.
  double normal() {
    double u1 = uniform();
    while (u1 == 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace tgcn

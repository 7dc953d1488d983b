#pragma once

/**
 * @file rng.hpp
 * @brief Deterministic random number generation for the samplers.
 *
 * Chains must be reproducible bit-exactly from a 64-bit seed, so uniform
 * doubles are built from raw mt19937_64 output and Gaussians use an explicit
 * Box-Muller transform; std::uniform_real_distribution and
 * std::normal_distribution are implementation-defined and would break
 * cross-toolchain reproducibility.
 */

#include <cmath>
#include <cstdint>
#include <random>

namespace ductile::rng {

/// One step of the splitmix64 sequence (also usable as a mixing function).
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derive an independent stream seed from (root, stage, chain) so that
/// per-stage, per-chain streams never collide or overlap.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t a,
                                 std::uint64_t b) {
  std::uint64_t s = root;
  splitmix64(s);
  s ^= a;
  splitmix64(s);
  s ^= b;
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (pairs cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]: keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    has_spare_ = true;
    return r * std::cos(two_pi * u2);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace ductile::rng

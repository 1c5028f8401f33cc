#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dm1 {

// SplitMix64 stream. The whole stream is defined by the 64-bit state, so any
// other implementation seeded identically reproduces it bit for bit.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1].
  double uniform_open_zero() { return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53; }

  // Standard normal by Box-Muller. Consumes exactly two draws (u1 then u2)
  // and returns the cosine branch only; no cached second value.
  double normal() {
    const double u1 = uniform_open_zero();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Child seed for a named subsystem ("data", "init", "noise", "timepairs").
// One SplitMix64 step from root ^ fnv1a64(label).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label) {
  return SplitMix64(root ^ fnv1a64(label)).next();
}

}  // namespace dm1

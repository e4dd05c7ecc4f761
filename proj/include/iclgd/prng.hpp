#pragma once

// Counter-based splittable PRNG.
//
// Stream member i is splitmix64's finalizer applied to key + i*GOLDEN, so a
// generator is fully described by (key, counter) and produces bitwise-identical
// streams on every platform. split(tag) derives an independent child key, which
// lets parallel experiment arms draw reproducible streams without sharing state.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace iclgd {

class Prng {
 public:
  explicit Prng(std::uint64_t seed, std::uint64_t counter = 0)
      : key_(seed), counter_(counter) {}

  std::uint64_t next_u64() { return finalize(key_ + kGolden * ++counter_); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // One standard normal via Box-Muller (cosine branch only, two uniforms per
  // draw, no cached state -- draw order alone determines the stream).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard against log(0).
    u1 = 1.0 - u1;
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double sigma) { return sigma == 0.0 ? 0.0 : sigma * normal(); }

  // Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Independent child stream keyed by an integer tag.
  Prng split(std::uint64_t tag) const {
    return Prng(finalize(key_ ^ finalize(kGolden * (tag + 1))));
  }

  // Child stream keyed by a string (e.g. a parameter tensor name).
  Prng split(std::string_view tag) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (char c : tag) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ull;
    }
    return split(h);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace iclgd

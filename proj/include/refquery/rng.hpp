#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace refquery {

// Deterministic RNG used everywhere randomness is needed (parameter init,
// synthetic data, test inputs). std::mt19937 has a fully specified output
// sequence; the float conversions below are spelled out explicitly so that
// streams are bit-identical across platforms. Never use std::*_distribution
// here: their algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(split_mix(seed))) {}

  std::uint32_t next_u32() { return gen_(); }

  // Uniform in [0, 1) with 24 bits of mantissa.
  float uniform() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; deterministic, one value per call.
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = uniform();
    float u2 = uniform();
    if (u1 < 1e-12f) u1 = 1e-12f;
    const float r = std::sqrt(-2.0f * std::log(u1));
    const float a = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  std::uint32_t below(std::uint32_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint32_t limit = 0xFFFFFFFFu - (0xFFFFFFFFu % n);
    std::uint32_t x = next_u32();
    while (x >= limit) x = next_u32();
    return x % n;
  }

  // Stateless mixing for deriving independent child seeds.
  static std::uint64_t split_mix(std::uint64_t x) {
    x += 0x9E3779B97f4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    return split_mix(seed * 0x100000001B3ull + stream);
  }

 private:
  std::mt19937 gen_;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

}  // namespace refquery

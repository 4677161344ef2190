#pragma once

// Deterministic pseudo-random source shared by data generation and weight
// init. The generator is a 64-bit LCG (state' = state * 6364136223846793005
// + 1442695040888963407) emitting the top 32 bits, so streams reproduce
// exactly across platforms and languages.

#include <cmath>
#include <cstdint>

namespace sa3 {

class Lcg64 {
 public:
  explicit Lcg64(std::uint64_t seed) : state_(seed) {}

  std::uint32_t next_u32() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<std::uint32_t>(state_ >> 32);
  }

  // uniform in [0, 1)
  double next_double() { return next_u32() / 4294967296.0; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // inclusive on both ends
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u32() % static_cast<std::uint32_t>(hi - lo + 1));
  }

  // Box-Muller, one draw per call; u1 is kept in (0,1] so log never sees 0.
  double gaussian() {
    double u1 = (static_cast<double>(next_u32()) + 1.0) / 4294967296.0;
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Independent per-record seed so records can be produced in any order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  return splitmix64(seed ^ splitmix64(index + 0x9E3779B97F4A7C15ULL));
}

}  // namespace sa3

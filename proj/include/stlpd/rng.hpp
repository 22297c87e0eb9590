#pragma once

#include <cmath>
#include <cstdint>

namespace stlpd {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (splitmix64(b) + 0x9e3779b97f4a7c15ull));
}

// Counter-free xorshift generator; identical streams on every platform, so
// seeded runs are byte-reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x2545f4914f6cdd1dull)) {
    if (state_ == 0) state_ = 0x9e3779b97f4a7c15ull;
  }

  uint32_t next_u32() {
    state_ ^= state_ << 13;
    state_ ^= state_ >> 7;
    state_ ^= state_ << 17;
    return uint32_t(state_ >> 32);
  }

  // [0, 1)
  float uniform() { return float(next_u32() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float a, float b) { return a + (b - a) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return int(uint64_t(next_u32()) * uint64_t(n) >> 32); }

  bool coin() { return (next_u32() & 1u) != 0; }

  float normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    float u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-12f);
    u2 = uniform();
    const float r = std::sqrt(-2.0f * std::log(u1));
    const float a = 6.28318530717958647692f * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  float cached_ = 0;
  bool has_cached_ = false;
};

}  // namespace stlpd

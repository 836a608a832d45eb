#pragma once

#include <cmath>
#include <cstdint>

namespace diffcap {

/// Deterministic random source. A single xoshiro256** stream with all draw
/// kinds hand-rolled on top of the raw 64-bit output, so sequences are
/// reproducible bit for bit across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    // splitmix64 spreads an arbitrary seed over the full state.
    std::uint64_t x = seed;
    for (auto& w : state_) w = splitmix(x);
  }

  /// Independent stream keyed by (seed, a, b). Records, examples in a batch
  /// and parallel-safe dataset generation all derive from here.
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t x = seed;
    std::uint64_t h = splitmix(x);
    x ^= a * 0x9e3779b97f4a7c15ull;
    h ^= splitmix(x);
    x ^= b * 0xbf58476d1ce4e5b9ull;
    h ^= splitmix(x);
    return Rng(h);
  }

  std::uint64_t next() {
    std::uint64_t* s = state_;
    std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return (double)(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n is tiny next to 2^64, so plain modulo
  /// bias is far below anything observable here.
  int uniform_int(int n) { return (int)(next() % (std::uint64_t)n); }

  /// Standard normal via Box-Muller, one value per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log1p(-u1));
    return r * std::cos(6.283185307179586 * u2);
  }

 private:
  static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

  static std::uint64_t splitmix(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4];
};

}  // namespace diffcap

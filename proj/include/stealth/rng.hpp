#pragma once

#include <cmath>
#include <cstdint>

namespace stealth {

// Deterministic splitmix64 stream. The transforms below are hand-rolled so
// that a given seed reproduces bit-identical draws on every platform and
// standard library; std:: distributions are implementation-defined and
// forbidden here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // (0,1), safe as a log() argument
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  int uniform_int(int lo, int hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // [0, n)
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Box-Muller; draws two uniforms per sample, no caching, so the stream
  // position is a pure function of the call count.
  double normal(double mean, double stddev) {
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

 private:
  std::uint64_t state_;
};

// Stable child-stream derivation: mixing (base, tags...) through splitmix
// steps decouples every consumer from draw ordering elsewhere in the run.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0,
                                 std::uint64_t d = 0) {
  Rng mix(base);
  std::uint64_t s = mix.next_u64();
  for (std::uint64_t t : {a, b, c, d}) {
    Rng step(s ^ (t + 0x9e3779b97f4a7c15ull));
    s = step.next_u64();
  }
  return s;
}

}  // namespace stealth

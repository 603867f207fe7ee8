#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace cmfn {

// splitmix64 step; used to derive independent per-sample seeds from a
// master seed without correlations between neighbouring streams.
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d4a2ca9f13d525ull;
  return z ^ (z >> 31);
}

// Seeded RNG with hand-rolled distribution transforms. std::mt19937_64 output
// is pinned by the standard, and doing the transforms ourselves keeps results
// bit-identical across standard library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return engine_() % n; }

  // standard normal via Box-Muller (one value per draw, cached pair unused
  // on purpose: simpler reasoning about draw order)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cmfn

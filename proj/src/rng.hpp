#pragma once

#include <cmath>
#include <cstdint>

namespace slkd {

// splitmix64-based generator. std:: distributions are implementation-defined,
// which would break the bit-reproducibility contracts, so we roll our own.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

  double normal() {
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    const double two_pi = 6.283185307179586;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * uniform());
  }

  // Independent derived stream, e.g. one per sample index or training step.
  Rng fork(uint64_t stream) const {
    Rng r(state ^ (0x9e3779b97f4a7c15ull * (stream + 0x632be59bd9b4e019ull)));
    r.next_u64();
    return r;
  }
};

}  // namespace slkd

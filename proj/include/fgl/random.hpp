#pragma once

#include <cstdint>
#include <random>

namespace fgl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, index), e.g. one per generated pair or per
// training iteration.
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t salt = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ splitmix64(salt)) + index));
}

template <class Rng>
double sample_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  for (;;) {
    const double x = ga(rng);
    const double y = gb(rng);
    const double v = x / (x + y);
    if (v > 0.0 && v <= 1.0) return v;
  }
}

}  // namespace fgl

#pragma once

#include <cstdint>
#include <random>

namespace cpkd {

// Deterministic random source. All randomness in the project flows through
// this class so that runs with equal seeds are reproducible byte-for-byte.
// Gaussians use an explicit Box-Muller transform instead of
// std::normal_distribution, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Uniform in [0, 1).
  double uniform();
  // Standard normal.
  double gaussian();
  // Uniform integer in [0, n); n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  bool bernoulli(double p);

  // Derives an independent stream keyed by `stream`. Streams derived from the
  // same (seed, stream) pair are identical, so work can be split per item
  // without making the result depend on scheduling.
  Rng split(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 gen_;
  bool has_spare_{false};
  double spare_{0.0};
};

}  // namespace cpkd

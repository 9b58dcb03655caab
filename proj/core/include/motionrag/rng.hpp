#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace motionrag {

// Seeded generator with distributions implemented here rather than through
// <random>'s distribution objects, whose output is implementation-defined.
// Identical seeds therefore give identical streams on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, n); n must be positive.
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed for a named stage from a global seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace motionrag

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace f2d {

/// Derives an independent seed for a named substream of a global seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// Seeded random source. All randomness in the library goes through this.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  Rng substream(std::string_view name) { return Rng(derive_seed(engine_(), name)); }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace f2d

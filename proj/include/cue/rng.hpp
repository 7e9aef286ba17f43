#pragma once

#include <cstdint>

#include "cue/tensor.hpp"

namespace cue {

// xoshiro256** seeded through splitmix64. Normal draws use the Marsaglia-Tsang
// ziggurat with 128 layers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n); n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);
  double normal() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state) noexcept;
// Seed for the index-th independent sub-stream of a run.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept;
std::uint64_t hash_string(const char* s) noexcept;

Tensor sample_std_normal(Rng& rng, Shape shape);

}  // namespace cue

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace moe {

std::uint64_t splitmix64(std::uint64_t x) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;

// Uniform in [0, 1) determined entirely by (seed, stream, index). Used where
// results must not depend on iteration order.
double keyed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) noexcept;

// Sequential generator with a portable normal sampler (Box-Muller over
// mt19937_64), so seeded draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  std::size_t below(std::size_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace moe

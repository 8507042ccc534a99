#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "dmq/tensor.hpp"

namespace dmq {

/// Seeded deterministic generator.
///
/// The raw stream is std::mt19937_64, whose output sequence is fixed by the
/// C++ standard. Uniform doubles take the top 53 bits of one draw. Normal
/// variates use the Marsaglia polar method on top of those uniforms, so they
/// depend only on the raw stream plus std::log/std::sqrt.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64+polar";

  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  Tensor normal_tensor(Shape shape);
  Tensor uniform_tensor(Shape shape, double lo, double hi);
  /// Fisher-Yates permutation of [0, n).
  std::vector<std::size_t> permutation(std::size_t n);

  /// Independent child generator derived from this seed and a stream label.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dmq

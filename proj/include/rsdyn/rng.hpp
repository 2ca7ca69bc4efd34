#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace rsdyn {

/// Seedable 64-bit generator used for every stochastic step in the toolkit.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The derived draws (bounded integers, uniforms, normals) are
/// implemented here rather than via <random> distributions, whose algorithms
/// are implementation-defined, so that a seed produces the same stream on
/// every platform and library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, bound). Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    // Fisher-Yates, high index first.
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; combines a base seed with a stream index so that
/// per-unit streams do not depend on scheduling order.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace rsdyn

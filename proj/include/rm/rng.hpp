#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace rm {

/// Counter-based pseudorandom generator.
///
/// Draw i of a generator seeded with s is splitmix64(s + (i + 1) * golden),
/// the SplitMix64 output function applied to an arithmetic counter. The
/// sequence depends only on (seed, counter), so it is identical across
/// platforms and compilers. Integer draws use rejection sampling, real draws
/// take the top 53 (or 24) bits; no std:: distribution is involved.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "splitmix64-counter";

  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();

  /// Uniform integer in [0, bound). bound must be positive.
  std::uint64_t uniform_int(std::uint64_t bound);

  /// Uniform double in [0, 1).
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Independent child stream keyed by a path of integers, e.g.
  /// fork({chain, sample}). The parent is not advanced.
  Rng fork(std::initializer_list<std::uint64_t> path) const;

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  static std::uint64_t mix(std::uint64_t z);

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace rm

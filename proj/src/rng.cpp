#include "rm/rng.hpp"

#include <stdexcept>

namespace rm {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t Rng::mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix(seed_ + counter_ * kGolden);
}

std::uint64_t Rng::uniform_int(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("Rng::uniform_int: bound must be positive");
  // Reject the short tail so every residue is equally likely.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

Rng Rng::fork(std::initializer_list<std::uint64_t> path) const {
  std::uint64_t s = mix(seed_ ^ 0xD1B54A32D192ED03ULL);
  for (auto p : path) s = mix(s ^ mix(p + kGolden));
  return Rng(s);
}

}  // namespace rm

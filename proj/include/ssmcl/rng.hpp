#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ssmcl {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

// Counter-based generator: the i-th draw of stream (seed, key) is a pure
// function of (seed, key, i), so independent streams never perturb each other.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t key) : base_(mix_key(seed, key)) {}

  std::uint64_t next_u64() { return splitmix64(base_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  // Uniform in [0, 1) with 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; consumes two draws per call.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

 private:
  std::uint64_t base_;
  std::uint64_t counter_ = 0;
};

}  // namespace ssmcl

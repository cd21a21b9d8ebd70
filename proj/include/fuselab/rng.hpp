#pragma once
// Deterministic splittable counter-based RNG.
//
// Draw i of a generator seeded with s is splitmix64_finalize(s + (i+1)*GOLDEN),
// so the sequence is a pure function of (seed, counter) with no hidden state
// beyond the counter. Identical seeds give bitwise-identical integer draws on
// any platform; child streams rehash the seed with a stream tag and start a
// fresh counter. Normal deviates use Box-Muller on two uniform draws.

#include <cmath>
#include <cstdint>
#include <vector>

namespace fuselab {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return detail::mix64(seed_ + (++counter_) * detail::kGolden); }

  // Uniform in [0, 1), 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_normal(double mean, double stddev) {
    // u1 in (0, 1] so the log is always finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(6.283185307179586476925287 * u2);
  }

  // Uniform in [0, n). Modulo bias is negligible for the small n used here.
  std::size_t next_below(std::size_t n) {
    return n == 0 ? 0 : static_cast<std::size_t>(next_u64() % n);
  }

  // Independent child stream; deterministic in (seed, stream).
  Rng child(std::uint64_t stream) const {
    return Rng(detail::mix64(seed_ ^ detail::mix64(stream + detail::kGolden)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = next_below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace fuselab

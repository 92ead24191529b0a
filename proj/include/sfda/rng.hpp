#ifndef SFDA_RNG_HPP
#define SFDA_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace sfda {

/// Deterministic RNG built on mt19937_64 with hand-rolled distributions.
/// Standard-library distributions are implementation-defined, so uniform and
/// normal draws are derived directly from raw 64-bit outputs to keep every
/// dataset and training run bit-reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t raw() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n).
  int64_t below(int64_t n) {
    // modulo bias is negligible for the small n used here
    return static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller (no state caching, two raws per draw).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

/// FNV-1a over a string, used to derive independent substream seeds so that
/// e.g. enabling the discriminator never shifts the generator's noise stream.
inline uint64_t hash_key(const std::string& key) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Substream seeded by (master seed, purpose, counter).
inline Rng substream(uint64_t seed, const std::string& purpose, uint64_t counter = 0) {
  uint64_t h = hash_key(purpose);
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h ^= counter * 0xd1b54a32d192ed03ull;
  return Rng(h);
}

}  // namespace sfda

#endif  // SFDA_RNG_HPP

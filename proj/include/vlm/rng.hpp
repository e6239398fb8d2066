#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace vlm {

// Deterministic xoshiro256** generator with hand-rolled sampling.
// std::uniform_*_distribution is implementation-defined, so every draw here
// is specified down to the bit and identical on all platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    // splitmix64 expansion of the seed into the four state words.
    uint64_t x = seed;
    for (auto& w : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
    has_spare_ = false;
    spare_ = 0.0;
  }

  // Independent stream derived from a master seed and a small stream tag.
  static Rng derive(uint64_t master_seed, uint64_t stream, uint64_t index = 0) {
    return Rng(master_seed * 0x9e3779b97f4a7c15ULL + stream * 0xd1342543de82ef95ULL +
               index * 0x2545f4914f6cdd1dULL + 0x632be59bd9b4e019ULL);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
  uint64_t below(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::range: empty range");
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller with a cached spare.
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mu + sigma * r * std::cos(theta);
  }

  // Truncated at two standard deviations, resampled.
  double truncated_normal(double sigma) {
    for (;;) {
      const double z = normal(0.0, 1.0);
      if (std::fabs(z) <= 2.0) return z * sigma;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Full serializable state: 4 state words, spare flag, spare payload bits.
  std::array<uint64_t, 6> save_state() const {
    std::array<uint64_t, 6> s{};
    for (int i = 0; i < 4; ++i) s[static_cast<size_t>(i)] = state_[static_cast<size_t>(i)];
    s[4] = has_spare_ ? 1 : 0;
    uint64_t bits = 0;
    static_assert(sizeof(double) == sizeof(uint64_t));
    __builtin_memcpy(&bits, &spare_, sizeof(bits));
    s[5] = bits;
    return s;
  }

  void load_state(const std::array<uint64_t, 6>& s) {
    for (int i = 0; i < 4; ++i) state_[static_cast<size_t>(i)] = s[static_cast<size_t>(i)];
    has_spare_ = s[4] != 0;
    __builtin_memcpy(&spare_, &s[5], sizeof(spare_));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vlm

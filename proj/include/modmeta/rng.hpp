#pragma once

#include <cstdint>
#include <limits>

namespace modmeta {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256** generator. Satisfies UniformRandomBitGenerator, but the
/// helpers below are used instead of <random> distributions so that draws
/// are identical across standard library implementations.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform on [0, 1).
  double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's nearly-divisionless rejection method.
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t s_[4];
};

// Independent sub-streams keyed by what they are used for. Each per-task
// step draws from its own stream so results do not depend on evaluation
// order or thread count.
enum class Purpose : std::uint64_t {
  init = 1,
  bounce = 2,
  grad = 3,
  task_batch = 4,
  search = 5,
  suite = 6,
};

inline Rng stream(std::uint64_t seed, std::uint64_t task, std::uint64_t iteration,
                  Purpose purpose) noexcept {
  std::uint64_t h = seed;
  std::uint64_t mixed = splitmix64(h);
  h = mixed ^ (task * 0xd1342543de82ef95ULL);
  mixed = splitmix64(h);
  h = mixed ^ (iteration * 0x9e3779b97f4a7c15ULL);
  mixed = splitmix64(h);
  h = mixed ^ static_cast<std::uint64_t>(purpose);
  return Rng(splitmix64(h));
}

}  // namespace modmeta

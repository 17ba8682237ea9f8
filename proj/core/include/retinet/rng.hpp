#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <utility>

namespace retinet {

// SplitMix64; used only to expand seeds into xoshiro state.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}
  std::uint64_t next() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

// xoshiro256++ (Blackman & Vigna). Every random decision in the engine
// (initialization, shuffling, augmentation, dropout) draws from one of these.
//
// Stream splitting: Xoshiro256pp(seed, stream) seeds a SplitMix64 with
// `seed ^ mix(stream)` where mix is one SplitMix64 step over the stream id,
// then takes four outputs as the state. Nested streams (epoch, sample) are
// formed with `substream(seed, a, b)` = Xoshiro256pp(Xoshiro256pp(seed, a).next(), b).
class Xoshiro256pp {
 public:
  using result_type = std::uint64_t;
  using State = std::array<std::uint64_t, 4>;

  explicit Xoshiro256pp(std::uint64_t seed = 0, std::uint64_t stream = 0) noexcept {
    SplitMix64 mixer(stream);
    SplitMix64 sm(seed ^ mixer.next());
    for (auto& s : s_) s = sm.next();
  }

  static Xoshiro256pp from_state(const State& state) noexcept {
    Xoshiro256pp r;
    r.s_ = state;
    return r;
  }

  static Xoshiro256pp substream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) noexcept {
    Xoshiro256pp outer(seed, a);
    return Xoshiro256pp(outer.next(), b);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type(0); }
  result_type operator()() noexcept { return next(); }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) noexcept {
    if (bound <= 1) return 0;
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % bound;
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  [[nodiscard]] const State& state() const noexcept { return s_; }

  friend bool operator==(const Xoshiro256pp& a, const Xoshiro256pp& b) noexcept {
    return a.s_ == b.s_;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  State s_{};
};

// Fisher-Yates with the engine's generator; std::shuffle's algorithm is
// implementation-defined, this is not.
template <typename Vec>
void deterministic_shuffle(Vec& v, Xoshiro256pp& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace retinet

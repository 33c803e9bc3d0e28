#pragma once

#include <array>
#include <cstdint>

namespace hdmae {

// Reproducible random streams.
//
// Generator: xoshiro256** (Blackman & Vigna, 2018). The 256-bit state is
// filled from the 64-bit seed by four successive outputs of SplitMix64
// (state += 0x9E3779B97F4A7C15; z = state; z = (z ^ (z >> 30)) *
// 0xBF58476D1CE4E5B9; z = (z ^ (z >> 27)) * 0x94D049BB133111EB; z ^ z >> 31).
//
// Derived variates:
//   uniform()       (next_u64() >> 11) * 2^-53, in [0, 1)
//   uniform_open()  ((next_u64() >> 11) + 0.5) * 2^-53, in (0, 1)
//   normal()        Box-Muller cosine branch on two uniform_open() draws,
//                   sqrt(-2 ln u1) * cos(2 pi u2); no cached second value
//   gumbel()        -ln(-ln(uniform_open()))
//   below(n)        rejection sampling on next_u64() against the largest
//                   multiple of n, then modulo n
class Rng {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();
  double uniform_open();
  double normal();
  double gumbel();
  std::uint64_t below(std::uint64_t n);

  const State& state() const { return s_; }
  void set_state(const State& s) { s_ = s; }

 private:
  State s_{};
};

// Purpose identifiers for stream splitting. A stream for purpose p under a
// top-level seed s is seeded with s + 1000 * p.
enum class StreamPurpose : std::uint64_t {
  kInit = 1,
  kMasking = 2,
  kData = 3,
  kProbe = 4,
};

std::uint64_t sub_seed(std::uint64_t seed, StreamPurpose purpose);

inline Rng make_stream(std::uint64_t seed, StreamPurpose purpose) {
  return Rng(sub_seed(seed, purpose));
}

}  // namespace hdmae

#pragma once

// Keyed random streams. Every Monte Carlo unit of work (a replication, a
// block of max-|t| draws, a candidate parameter) gets its own generator
// derived from (master seed, key...), so results never depend on how work is
// scheduled across threads.

#include "posi/core.hpp"

#include <array>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace posi {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** (Blackman & Vigna). Satisfies UniformRandomBitGenerator.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() {
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

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

// Generator for the substream identified by `key` under `seed`.
inline Xoshiro256 substream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
  std::uint64_t state = seed;
  std::uint64_t h = splitmix64(state);
  for (std::uint64_t k : key) {
    state ^= k + 0x632be59bd9b4e019ULL + (h << 6) + (h >> 2);
    h = splitmix64(state);
  }
  return Xoshiro256(h);
}

// Standard normal and chi-square draws on a keyed stream.
class Draws {
 public:
  explicit Draws(Xoshiro256 gen) : gen_(gen) {}

  double normal() { return normal_(gen_); }

  void fill_normal(Eigen::Ref<Vector> out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = normal_(gen_);
  }

  // sqrt(chi2_r / r), the law of sigma-hat / sigma.
  double sigma_ratio(const Dof& r) {
    if (r.is_known()) return 1.0;
    std::chi_squared_distribution<double> chi(r.as_double());
    return std::sqrt(chi(gen_) / r.as_double());
  }

  std::uint64_t bits() { return gen_(); }
  Xoshiro256& engine() { return gen_; }

 private:
  Xoshiro256 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace posi

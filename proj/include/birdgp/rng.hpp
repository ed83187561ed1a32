#pragma once

#include <cmath>
#include <cstdint>

#include "birdgp/errors.hpp"

namespace birdgp {

// PCG XSL-RR 128/64 (O'Neill 2014). Chosen for reproducible streams: the
// integer output sequence is a pure function of (seed, stream) and the 128-bit
// LCG state, so replay is exact on any 64-bit platform. Floating point
// variates additionally go through libm transcendentals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {
    state_ = 0u;
    inc_ = (static_cast<u128>(stream) << 1u) | 1u;
    next_u64();
    state_ += seed;
    next_u64();
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Fresh generator on a stream derived from this one's identity and `salt`.
  // Distinct salts give statistically independent streams.
  Rng child(std::uint64_t salt) const {
    return Rng(seed_, mix64(stream_ ^ mix64(salt + 0x9E3779B97F4A7C15ull)));
  }

  std::uint64_t next_u64() {
    state_ = state_ * kMult + inc_;
    const std::uint64_t xored =
        static_cast<std::uint64_t>(state_ >> 64u) ^ static_cast<std::uint64_t>(state_);
    const unsigned rot = static_cast<unsigned>(state_ >> 122u);
    return rotr(xored, rot);
  }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11u) * 0x1.0p-53; }

  // Uniform on (0, 1); never returns an endpoint (safe under log()).
  double uniform_pos() {
    return (static_cast<double>(next_u64() >> 11u) + 0.5) * 0x1.0p-53;
  }

  // Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw InvalidInput("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
    // Rejection-free multiply-shift; bias is < 2^-64 * span, negligible here.
    const u128 prod = static_cast<u128>(next_u64()) * static_cast<u128>(span);
    return lo + static_cast<std::int64_t>(static_cast<std::uint64_t>(prod >> 64u));
  }

  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_pos();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * kPi * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double sd) {
    if (!(sd > 0.0)) throw InvalidInput("normal: sd must be > 0");
    return mean + sd * normal();
  }

  // Gamma(shape a, rate b) by Marsaglia-Tsang squeeze; a < 1 handled by the
  // boost Gamma(a) = Gamma(a+1) * U^{1/a}.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0))
      throw InvalidInput("gamma: shape and rate must be > 0");
    if (shape < 1.0) {
      const double u = uniform_pos();
      return gamma(shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v / rate;
    }
  }

  // Inverse gamma with density proportional to x^{-a-1} exp(-b/x).
  double inverse_gamma(double a, double b) {
    if (!(a > 0.0) || !(b > 0.0))
      throw InvalidInput("inverse_gamma: parameters must be > 0");
    return 1.0 / gamma(a, b);
  }

  static std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30u)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27u)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31u);
  }

 private:
  using u128 = unsigned __int128;
  static constexpr u128 kMult =
      (static_cast<u128>(0x2360ED051FC65DA4ull) << 64u) | 0x4385DF649FCCF645ull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t rotr(std::uint64_t v, unsigned r) {
    return (v >> r) | (v << ((64u - r) & 63u));
  }

  u128 state_;
  u128 inc_;
  std::uint64_t seed_;
  std::uint64_t stream_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Free-function forms used throughout the samplers.
inline double sample_normal(double mean, double sd, Rng& rng) {
  return rng.normal(mean, sd);
}

inline double sample_inverse_gamma(double a, double b, Rng& rng) {
  return rng.inverse_gamma(a, b);
}

}  // namespace birdgp

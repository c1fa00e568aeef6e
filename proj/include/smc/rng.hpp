#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "smc/tensor.hpp"

namespace smc {

/// All randomness in the library flows through explicitly seeded engines of
/// this type. Distribution objects are constructed per draw so the engine
/// state alone captures the stream position.
using Rng = std::mt19937_64;

/// Independent child stream for one unit of work (a batch element, a class).
inline Rng substream(Rng& parent) {
  std::seed_seq seq{parent(), parent()};
  return Rng(seq);
}

inline Rng seeded(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  require(n > 0, "uniform_index: empty range");
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

/// Beta(a, b) through the ratio of two Gamma draws.
inline double beta_sample(Rng& rng, double a, double b) {
  require(a > 0.0 && b > 0.0, "beta_sample: shape parameters must be positive");
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream in(state);
  in >> rng;
  require(!in.fail(), "corrupt RNG state");
  return rng;
}

}  // namespace smc

// Shared vocabulary for the mcnmt library: vector aliases, the error
// hierarchy and the seeded random streams every stage draws from.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mcnmt {

using Vector = std::vector<double>;

/// Cluster / pseudo-label marker for samples that belong to no cluster.
inline constexpr int kOutlier = -1;

/// Sentinel for "no such sample".
inline constexpr std::size_t kNoIndex = static_cast<std::size_t>(-1);

// ---------------------------------------------------------------------------
// Errors. The CLI maps ConfigError to exit code 1 and everything else to 2.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class InsufficientIdentitiesError : public Error {
 public:
  using Error::Error;
};

class NoNegativesError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Small numeric helpers.

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("distance between vectors of different length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Random streams.
//
// Every run has one 64-bit seed. Each consumer (data generation, weight init,
// batch sampling, ...) derives its own stream from (seed, purpose, index) via
// splitmix64, so adding draws in one stage never perturbs another. The engine
// is std::mt19937_64; distributions come from <random>, which makes results
// bit-reproducible within one build/standard library.

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ fnv1a64(purpose)) + index);
}

inline Rng make_stream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(seed, purpose, index));
}

}  // namespace mcnmt

#ifndef RISHGEN_COMMON_HPP
#define RISHGEN_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rishgen {

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid arguments or violated preconditions.
class ArgumentError : public Error {
public:
  explicit ArgumentError(const std::string& msg) : Error(msg) {}
};

/// Malformed on-disk data. Carries the byte offset at which parsing failed.
class FormatError : public Error {
public:
  FormatError(const std::string& msg, std::uint64_t offset)
      : Error(msg + " (at byte offset " + std::to_string(offset) + ")"),
        byte_offset(offset) {}
  std::uint64_t byte_offset;
};

/// Numerical failure (singular system, NaN propagation, ...).
class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& msg) : Error(msg) {}
};

/// Bad or inconsistent run configuration.
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// A required upstream artifact (checkpoint, dataset) is missing.
class DependencyError : public Error {
public:
  explicit DependencyError(const std::string& msg) : Error(msg) {}
};

/// Deterministic counter-based random stream.
///
/// The stream is the splitmix64 sequence seeded with the 64-bit seed: each
/// draw advances an internal counter by the golden-ratio increment and
/// applies the splitmix64 finalizer. The same seed yields the same stream
/// on every run and platform; there is no hidden global state.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1), 53 mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Multiply-shift; bias is < 2^-64 and irrelevant for simulation use.
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller (two uniforms per draw, no caching,
  /// no rejection), so the consumption pattern is fixed.
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

private:
  std::uint64_t state_;
};

/// FNV-1a 64-bit hash, used for config fingerprints and seed derivation.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Derive an independent child seed from a parent seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = fnv1a64(tag);
  // One splitmix64 finalizer round over the combination.
  std::uint64_t z = seed ^ (h + 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
  return derive_seed(derive_seed(seed, tag), std::to_string(index));
}

}  // namespace rishgen

#endif

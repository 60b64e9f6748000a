#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace polarize {

/// Raised when a run configuration is structurally invalid (unknown key,
/// missing required field, value out of range). The CLI maps this to exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when optimization diverges (non-finite loss). Maps to exit 3.
struct TrainingFailure : std::runtime_error {
  TrainingFailure(const std::string& msg, int epoch_index)
      : std::runtime_error(msg), epoch(epoch_index) {}
  int epoch;
};

namespace detail {
[[noreturn]] inline void throw_invalid(const std::string& msg) {
  throw std::invalid_argument(msg);
}
}  // namespace detail

// Precondition check for operation arguments; violations are
// std::invalid_argument per the library's error contract.
#define PZ_REQUIRE(cond, msg)                 \
  do {                                        \
    if (!(cond)) ::polarize::detail::throw_invalid(msg); \
  } while (0)

/// splitmix64; used to derive independent RNG streams from one seed.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream = 0) {
  return std::mt19937_64(mix_seed(seed, stream));
}

/// FNV-1a over raw bytes; used for artifact hashes and freeze checksums.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace polarize

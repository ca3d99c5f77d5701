#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace blackfed {

enum class ErrorCode {
  invalid_shape,
  invalid_label,
  invalid_argument,
  contract_violation,
  non_finite,
  empty_split,
  schedule,
  protocol,
  session,
  io,
  config,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_shape: return "invalid-shape";
    case ErrorCode::invalid_label: return "invalid-label";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::contract_violation: return "contract-violation";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::empty_split: return "empty-split";
    case ErrorCode::schedule: return "schedule";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::session: return "session";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Seeded generator with platform-independent derived distributions.
///
/// The engine is mt19937_64, whose output sequence is fixed by the standard.
/// The std:: distributions are implementation-defined, so every draw used by
/// the library goes through the helpers below instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error(ErrorCode::invalid_argument, "Rng::below(0)");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Inclusive integer range.
  int range(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double normal() {
    // Box-Muller; u1 is kept away from zero.
    const double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925 * u2);
  }

  /// +1 or -1 with equal probability.
  int sign() { return (engine_() >> 63) ? 1 : -1; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Stable 64-bit mixing of a seed with a stream id (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace blackfed

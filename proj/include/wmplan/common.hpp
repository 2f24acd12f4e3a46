#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace wmplan {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;

/// Raised when a run configuration is malformed. The message names the key.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a runtime invariant is broken (non-finite loss, corrupt file).
class InvariantViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t splitmix64(std::uint64_t x);

/// 64-bit FNV-1a, used for config and parameter fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t v);

/**
 * @brief Seeded random source with platform-independent conversions.
 *
 * The engine is mt19937_64; uniform and normal draws are derived from raw
 * 64-bit outputs directly so that a seed gives the same stream with any
 * standard library. Independent streams are derived by hashing a key path.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Stream keyed by (seed, k0, k1, ...). Distinct keys give independent streams.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace wmplan

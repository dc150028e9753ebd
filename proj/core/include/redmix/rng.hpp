// Deterministic random number generation. Everything downstream assumes the
// exact bit streams produced here, so the generators are implemented in full
// rather than delegating to <random> (whose distributions are
// implementation-defined and would break byte-identical replay).
#pragma once

#include <cstdint>
#include <string_view>

namespace redmix {

/// Derives an independent 64-bit sub-seed from (seed, component, index).
/// Used everywhere a module needs its own stream: identical inputs yield
/// identical sub-seeds on every platform.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view component,
                          std::uint64_t index = 0);

/// xoshiro256++ with splitmix64 seeding. Uniforms, normals (Box-Muller) and
/// standard Gumbel draws. Not thread-safe; use one instance per task.
class Prng {
 public:
  explicit Prng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01();

  /// Uniform on the open interval (0, 1); safe under log().
  double uniform_open();

  /// Standard normal via Box-Muller; caches the paired draw.
  double normal();

  /// Standard Gumbel: -log(-log(U)), U in (0,1).
  double gumbel();

  /// Uniform integer in [0, n), n >= 1, via rejection sampling.
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace redmix

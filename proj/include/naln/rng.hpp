#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace naln {

/// Counter-based random stream.
///
/// Every value is a pure function of (key, counter), so a stream can be
/// re-created anywhere from its key alone. Keys for independent consumers
/// are derived with `derive`, e.g. `Rng(seed).derive("dropout").derive(step)`.
/// Distributions are implemented here instead of using <random> so that
/// draws are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t key = 0) : key_(mix(key ^ 0x6a09e667f3bcc909ULL)) {}

  Rng derive(std::string_view name) const;
  Rng derive(std::uint64_t index) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer on [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

  static std::uint64_t mix(std::uint64_t z);

 private:
  struct Raw {};
  Rng(std::uint64_t key, Raw) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace naln

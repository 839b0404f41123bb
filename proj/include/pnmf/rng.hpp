#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace pnmf {

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::span<const std::byte> bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;
std::uint64_t fnv1a64(std::string_view text) noexcept;

/// Counter-style generator: the stream is a pure function of
/// (seed, stream name, index0, index1), so any per-sample draw can be
/// reproduced independently of evaluation order or thread count.
class KeyedRng {
 public:
  KeyedRng(std::uint64_t seed, std::string_view stream, std::uint64_t index0 = 0,
           std::uint64_t index1 = 0) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Standard normal via Box-Muller.
  double normal() noexcept;

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace pnmf

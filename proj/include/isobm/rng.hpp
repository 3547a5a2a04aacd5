#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace isobm {

/// Philox4x32-10 counter-based bijection (Salmon et al., SC'11).
///
/// The output block is a pure function of (counter, key), which is what makes
/// every simulated path independent of how paths are scheduled on workers.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter apply(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent named sub-streams of one master seed (e.g. bootstrap draws
/// must not reuse the simulation noise).
enum class StreamPurpose : std::uint64_t {
  Simulation = 0,
  Resampling = 1,
  Sampling = 2,
};

/// Random draws for one path, keyed by (master_seed, path_index, step_index).
///
/// Counter layout: {block, step, path_lo, path_hi}; key: the master seed
/// (mixed with the purpose for non-simulation streams).
class PathStream {
 public:
  PathStream(std::uint64_t master_seed, std::uint64_t path_index,
             StreamPurpose purpose = StreamPurpose::Simulation)
      : path_(path_index) {
    const std::uint64_t k = purpose == StreamPurpose::Simulation
                                ? master_seed
                                : splitmix64(master_seed ^ splitmix64(static_cast<std::uint64_t>(purpose)));
    key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  [[nodiscard]] std::uint64_t path_index() const { return path_; }

  /// Two uniforms in the open interval (0, 1) from block `block` of step `step`.
  [[nodiscard]] std::array<double, 2> uniform_pair(std::uint32_t step, std::uint32_t block) const {
    const auto out = Philox4x32::apply(
        {block, step, static_cast<std::uint32_t>(path_), static_cast<std::uint32_t>(path_ >> 32)}, key_);
    const std::uint64_t a = (std::uint64_t{out[0]} << 32) | out[1];
    const std::uint64_t b = (std::uint64_t{out[2]} << 32) | out[3];
    return {to_unit(a), to_unit(b)};
  }

  /// Fills `out` with independent standard normals for step `step` (Box-Muller).
  void normals(std::uint32_t step, std::span<double> out) const {
    std::uint32_t block = 0;
    for (std::size_t i = 0; i < out.size(); i += 2, ++block) {
      const auto [u1, u2] = uniform_pair(step, block);
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double angle = 2.0 * std::numbers::pi * u2;
      out[i] = r * std::cos(angle);
      if (i + 1 < out.size()) out[i + 1] = r * std::sin(angle);
    }
  }

  void uniforms(std::uint32_t step, std::span<double> out) const {
    std::uint32_t block = 0;
    for (std::size_t i = 0; i < out.size(); i += 2, ++block) {
      const auto pair = uniform_pair(step, block);
      out[i] = pair[0];
      if (i + 1 < out.size()) out[i + 1] = pair[1];
    }
  }

 private:
  static double to_unit(std::uint64_t bits) {
    return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
  }

  std::uint64_t path_;
  Philox4x32::Key key_{};
};

}  // namespace isobm

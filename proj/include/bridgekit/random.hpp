#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "bridgekit/core.hpp"

namespace bridgekit {

/// Philox4x32-10 counter-based generator (Salmon et al., SC'11). A draw is a
/// pure function of (key, counter), so results never depend on how trajectories
/// are spread across threads.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter block(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      ctr = single_round(ctr, key);
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter single_round(const Counter& ctr, const Key& key) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
};

/// Independent streams used by the samplers and experiments.
enum class StreamTag : std::uint32_t {
  BootNoise = 1,
  StepNoise = 2,
  Data = 3,
  Condition = 4,
  Bias = 5,
};

/// Standard normal draws addressed by (seed, tag, stream, step). `stream` is
/// typically a trajectory index and `step` a grid index.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed, StreamTag tag = StreamTag::StepNoise)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32) ^ (static_cast<std::uint32_t>(tag) * 0x85EBCA6Bu)} {}

  template <typename Scalar = double>
  Vector<Scalar> draw(std::uint64_t stream, std::uint32_t step, Eigen::Index dim) const {
    Vector<Scalar> out(dim);
    for (Eigen::Index i = 0; i < dim; i += 2) {
      const auto pair = normal_pair(stream, step, static_cast<std::uint32_t>(i / 2));
      out(i) = static_cast<Scalar>(pair[0]);
      if (i + 1 < dim) out(i + 1) = static_cast<Scalar>(pair[1]);
    }
    return out;
  }

  /// Uniform draw in (0, 1).
  double uniform(std::uint64_t stream, std::uint32_t step, std::uint32_t index = 0) const {
    const auto r = Philox4x32::block(counter(stream, step, index), key_);
    return to_unit(r[0], r[1]);
  }

 private:
  Philox4x32::Counter counter(std::uint64_t stream, std::uint32_t step, std::uint32_t index) const {
    return {static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), step, index};
  }

  static double to_unit(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = ((std::uint64_t{hi} << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Box-Muller on one Philox block.
  std::array<double, 2> normal_pair(std::uint64_t stream, std::uint32_t step, std::uint32_t index) const {
    const auto r = Philox4x32::block(counter(stream, step, index), key_);
    const double u1 = to_unit(r[0], r[1]);
    const double u2 = to_unit(r[2], r[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return {radius * std::cos(angle), radius * std::sin(angle)};
  }

  Philox4x32::Key key_;
};

}  // namespace bridgekit

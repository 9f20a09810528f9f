#pragma once

// Counter-based Philox4x32-10 generator. Every draw is a pure function of
// (key, counter), so streams are reproducible regardless of evaluation order.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace femtk {

class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static constexpr Counter generate(Counter ctr, Key key) {
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

// Two standard normal deviates for (seed, stream, step, block). Box-Muller on
// two 53-bit uniforms in (0, 1).
inline std::array<double, 2> counter_normal_pair(std::uint64_t seed, std::uint32_t stream, std::uint64_t step,
                                                 std::uint32_t block) {
  const auto out = Philox4x32::generate(
      {static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), stream, block},
      {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
  const std::uint64_t a = (std::uint64_t{out[0]} << 32) | out[1];
  const std::uint64_t b = (std::uint64_t{out[2]} << 32) | out[3];
  constexpr double k53 = 1.0 / 9007199254740992.0;
  const double u1 = (static_cast<double>(a >> 11) + 0.5) * k53;
  const double u2 = (static_cast<double>(b >> 11) + 0.5) * k53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double t = 2.0 * std::numbers::pi * u2;
  return {r * std::cos(t), r * std::sin(t)};
}

}  // namespace femtk

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "xkey/volume.hpp"

namespace xkey {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds from (seed, tag).
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline double uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Vec3 random_unit_vector(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3 v(n(rng), n(rng), n(rng));
    const double len = v.norm();
    if (len > 1e-12) return v / len;
  }
}

inline Mat3 axis_angle(const Vec3& axis, double angle_deg) {
  return Eigen::AngleAxisd(angle_deg * std::numbers::pi / 180.0, axis.normalized())
      .toRotationMatrix();
}

/// Rotation about a uniformly random axis by an angle uniform in [0, max_deg].
inline Mat3 random_rotation(Rng& rng, double max_deg) {
  const Vec3 axis = random_unit_vector(rng);
  const double angle = max_deg > 0.0 ? uniform(rng, 0.0, max_deg) : 0.0;
  return axis_angle(axis, angle);
}

/// Random rigid transform with rotation <= max_deg about `center` and translation
/// uniform in the ball of radius max_mm.
inline RigidTransform random_rigid(Rng& rng, double max_deg, double max_mm,
                                   const Vec3& center = Vec3::Zero()) {
  const Mat3 r = random_rotation(rng, max_deg);
  const Vec3 dir = random_unit_vector(rng);
  const double radius = max_mm * std::cbrt(uniform(rng));
  return {r, center - r * center + dir * radius};
}

}  // namespace xkey

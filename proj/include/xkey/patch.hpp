#pragma once

#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "xkey/keypoint.hpp"
#include "xkey/volume.hpp"

namespace xkey {

enum class Modality { mr, us };

/// Cubic s^3 patch, x-fastest. Voxel i sits at offset (i - s/2) voxels from the
/// keypoint, so the keypoint falls on voxel (s/2, s/2, s/2).
struct Patch {
  int size = 0;
  std::vector<float> values;
  Modality modality = Modality::mr;
  Keypoint center;

  float operator()(int x, int y, int z) const { return values[x + size * (y + size * z)]; }
  float& at(int x, int y, int z) { return values[x + size * (y + size * z)]; }
};

inline int overcrop_size(int s) { return static_cast<int>(std::ceil(1.5 * s)); }

/// Extracts an s^3 patch whose content is rotated by `rotation` about the
/// keypoint: a ceil(1.5 s)^3 over-crop is sampled first (zero outside the
/// volume), rotated with trilinear interpolation, then centre-cropped.
inline Patch extract_patch(const Volume& v, const Keypoint& center, int s, const Mat3& rotation = Mat3::Identity(),
                           Modality modality = Modality::mr) {
  require(s >= 1, ErrorKind::invalid_argument, "patch size must be >= 1");
  const Grid& g = v.grid();
  const Index3 cv = g.nearest_voxel(center.position_mm);
  require(g.contains(cv[0], cv[1], cv[2]), ErrorKind::out_of_bounds, "patch centre outside volume");

  const int big = overcrop_size(s);
  const int big_half = big / 2;
  Grid crop_grid;
  crop_grid.dims = {big, big, big};
  crop_grid.spacing = g.spacing;
  crop_grid.origin = center.position_mm - big_half * g.spacing;
  Volume crop(crop_grid);
  for (int z = 0; z < big; ++z)
    for (int y = 0; y < big; ++y)
      for (int x = 0; x < big; ++x)
        crop(x, y, z) = static_cast<float>(trilinear_sample(v, crop_grid.world(x, y, z), OutOfBounds::fill_zero));

  Patch p;
  p.size = s;
  p.values.resize(static_cast<std::size_t>(s) * s * s);
  p.modality = modality;
  p.center = center;
  const int half = s / 2;
  const bool identity = rotation == Mat3::Identity();
  const Mat3 inv = rotation.transpose();
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        if (identity) {
          p.at(x, y, z) = crop(x - half + big_half, y - half + big_half, z - half + big_half);
          continue;
        }
        const Vec3 offset = Vec3(x - half, y - half, z - half).cwiseProduct(g.spacing);
        const Vec3 src = center.position_mm + inv * offset;
        p.at(x, y, z) = static_cast<float>(trilinear_sample(crop, src, OutOfBounds::fill_zero));
      }
  return p;
}

inline std::vector<Patch> extract_patches(const Volume& v, std::span<const Keypoint> kps, int s,
                                          Modality modality = Modality::mr) {
  std::vector<Patch> out;
  out.reserve(kps.size());
  for (const Keypoint& k : kps) out.push_back(extract_patch(v, k, s, Mat3::Identity(), modality));
  return out;
}

/// Descriptor set: one unit-norm column per keypoint.
using DescriptorSet = Eigen::MatrixXf;

/// Handcrafted control descriptor: Gaussian-weighted SSD between the central
/// sub-block and copies shifted along +-x, +-y, +-z at two radii, divided by
/// their mean, exponentiated and L2-normalised (12 values).
inline Eigen::VectorXf selfsim_descriptor(const Patch& p) {
  const int s = p.size;
  require(s >= 8, ErrorKind::invalid_argument, "self-similarity descriptor needs patch size >= 8");
  const int c = s / 2;
  const int rb = std::max(1, s / 8);
  const double sigma = std::max(0.5, rb / 1.5);
  const int radii[2] = {std::max(1, s / 8), std::max(2, s / 4)};
  static constexpr int dirs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

  std::vector<double> ssd;
  ssd.reserve(12);
  for (int r : radii)
    for (const auto& d : dirs) {
      double acc = 0.0;
      for (int z = -rb; z <= rb; ++z)
        for (int y = -rb; y <= rb; ++y)
          for (int x = -rb; x <= rb; ++x) {
            const double w = std::exp(-0.5 * (x * x + y * y + z * z) / (sigma * sigma));
            const double a = p(c + x, c + y, c + z);
            const double b = p(c + x + r * d[0], c + y + r * d[1], c + z + r * d[2]);
            acc += w * (a - b) * (a - b);
          }
      ssd.push_back(acc);
    }
  double mean = 0.0;
  for (double v : ssd) mean += v;
  mean /= static_cast<double>(ssd.size());
  Eigen::VectorXd out(static_cast<Eigen::Index>(ssd.size()));
  for (std::size_t i = 0; i < ssd.size(); ++i)
    out[static_cast<Eigen::Index>(i)] = std::exp(-ssd[i] / (mean + 1e-30));
  return (out / std::sqrt(out.squaredNorm() + 1e-12)).cast<float>();
}

inline DescriptorSet selfsim_descriptors(std::span<const Patch> patches) {
  DescriptorSet out(12, static_cast<Eigen::Index>(patches.size()));
  for (std::size_t i = 0; i < patches.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = selfsim_descriptor(patches[i]);
  return out;
}

}  // namespace xkey

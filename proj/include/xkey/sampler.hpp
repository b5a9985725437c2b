#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xkey/keypoint.hpp"
#include "xkey/random.hpp"
#include "xkey/saliency.hpp"
#include "xkey/volume.hpp"

namespace xkey {

/// Summed-volume table over a FoV mask for O(1) box counts.
class FovIntegral {
 public:
  explicit FovIntegral(const FovMask& fov) : dims_(fov.dims()) {
    const std::size_t nx = dims_[0] + 1, ny = dims_[1] + 1, nz = dims_[2] + 1;
    table_.assign(nx * ny * nz, 0);
    for (int z = 0; z < dims_[2]; ++z)
      for (int y = 0; y < dims_[1]; ++y)
        for (int x = 0; x < dims_[0]; ++x)
          at(x + 1, y + 1, z + 1) = fov(x, y, z) + at(x, y + 1, z + 1) + at(x + 1, y, z + 1) +
                                    at(x + 1, y + 1, z) - at(x, y, z + 1) - at(x, y + 1, z) -
                                    at(x + 1, y, z) + at(x, y, z);
  }

  /// Number of FoV voxels in the inclusive box [lo, hi] (clipped to the grid).
  std::int64_t count(Index3 lo, Index3 hi) const {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::max(lo[a], 0);
      hi[a] = std::min(hi[a], dims_[a] - 1);
      if (lo[a] > hi[a]) return 0;
    }
    const int x0 = lo[0], y0 = lo[1], z0 = lo[2], x1 = hi[0] + 1, y1 = hi[1] + 1, z1 = hi[2] + 1;
    return at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) +
           at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
  }

 private:
  std::int64_t& at(int x, int y, int z) {
    return table_[x + (dims_[0] + 1) * (static_cast<std::size_t>(y) + (dims_[1] + 1) * static_cast<std::size_t>(z))];
  }
  std::int64_t at(int x, int y, int z) const {
    return table_[x + (dims_[0] + 1) * (static_cast<std::size_t>(y) + (dims_[1] + 1) * static_cast<std::size_t>(z))];
  }

  Index3 dims_;
  std::vector<std::int64_t> table_;
};

/// Voxel box covered by an s^3 patch centred on voxel c (offsets -s/2 .. s/2-1).
inline std::pair<Index3, Index3> patch_box(const Index3& c, int patch_size) {
  Index3 lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = c[a] - patch_size / 2;
    hi[a] = lo[a] + patch_size - 1;
  }
  return {lo, hi};
}

/// C1: at least `fraction` of the patch footprint lies inside the FoV.
inline bool patch_in_fov(const FovIntegral& integral, const Index3& c, int patch_size, double fraction) {
  const auto [lo, hi] = patch_box(c, patch_size);
  const double total = std::pow(static_cast<double>(patch_size), 3);
  return static_cast<double>(integral.count(lo, hi)) >= fraction * total - 1e-9;
}

struct SamplerParams {
  int patch_size = 16;
  double min_dist_mm = 2.0;
  double fov_fraction = 0.8;
  std::size_t attempts_per_point = 1000;
};

/// Sequential rejection sampling from P_res under C1 (patch coverage) and
/// C2 (pairwise distance >= min_dist).
inline std::vector<Keypoint> sample_keypoints(const SaliencyMap& p_res, const FovMask& fov, std::size_t n,
                                              const SamplerParams& params, std::uint64_t seed) {
  require(n >= 1, ErrorKind::invalid_argument, "need n >= 1 keypoints");
  require(params.patch_size >= 1, ErrorKind::invalid_argument, "patch_size must be >= 1");
  require_congruent(p_res.grid(), fov.grid(), "sample_keypoints");
  const Grid& g = p_res.grid();

  std::vector<double> cdf(p_res.map.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cdf.size(); ++i) {
    total += std::max(0.0f, p_res.map[i]);
    cdf[i] = total;
  }
  require(total > 0.0, ErrorKind::invalid_argument, "P_res is identically zero");

  const FovIntegral integral(fov);
  Rng rng(mix_seed(seed, 0x5A3B));
  std::uniform_real_distribution<double> u(0.0, total);
  const double min_d2 = params.min_dist_mm * params.min_dist_mm;
  const std::size_t max_attempts = params.attempts_per_point * n;

  std::vector<Keypoint> out;
  out.reserve(n);
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (attempts++ >= max_attempts)
      throw Error(ErrorKind::infeasible, "sampler placed " + std::to_string(out.size()) + " of " +
                                             std::to_string(n) + " keypoints after " +
                                             std::to_string(max_attempts) + " attempts");
    const double r = u(rng);
    std::size_t idx = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    idx = std::min(idx, cdf.size() - 1);
    if (p_res.map[idx] <= 0.0f) continue;
    const Index3 c = g.coords(idx);
    if (!patch_in_fov(integral, c, params.patch_size, params.fov_fraction)) continue;
    const Vec3 p = g.world(c[0], c[1], c[2]);
    bool clear = true;
    for (const Keypoint& k : out)
      if ((k.position_mm - p).squaredNorm() < min_d2) {
        clear = false;
        break;
      }
    if (!clear) continue;
    out.push_back(Keypoint::at(g, p, params.patch_size * g.spacing.mean(), p_res.map[idx]));
  }
  return out;
}

struct FovBox {
  Vec3 min_mm, max_mm;
};

inline FovBox fov_bounding_box(const FovMask& fov) {
  const Grid& g = fov.grid();
  Index3 lo{g.dims[0], g.dims[1], g.dims[2]}, hi{-1, -1, -1};
  for (std::size_t i = 0; i < fov.size(); ++i) {
    if (!fov[i]) continue;
    const Index3 c = g.coords(i);
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], c[a]);
      hi[a] = std::max(hi[a], c[a]);
    }
  }
  require(hi[0] >= 0, ErrorKind::degenerate, "FoV mask is empty");
  return {g.world(lo[0], lo[1], lo[2]), g.world(hi[0], hi[1], hi[2])};
}

/// Lattice points with the given step covering the FoV bounding box, before
/// any coverage test. The lattice passes through `anchor` when given, otherwise
/// through the bounding-box minimum.
inline std::vector<Vec3> lattice_candidates(const FovMask& fov, double step_mm,
                                            const std::optional<Vec3>& anchor = std::nullopt) {
  require(step_mm > 0.0, ErrorKind::invalid_argument, "grid step must be > 0");
  const FovBox box = fov_bounding_box(fov);
  const Vec3 a = anchor.value_or(box.min_mm);
  Index3 lo{}, hi{};
  for (int ax = 0; ax < 3; ++ax) {
    lo[ax] = static_cast<int>(std::ceil((box.min_mm[ax] - a[ax]) / step_mm - 1e-9));
    hi[ax] = static_cast<int>(std::floor((box.max_mm[ax] - a[ax]) / step_mm + 1e-9));
  }
  std::vector<Vec3> pts;
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) pts.push_back(a + step_mm * Vec3(i, j, k));
  return pts;
}

/// Uniform lattice keypoints inside the FoV, kept iff their patch passes C1.
inline std::vector<Keypoint> grid_keypoints(const FovMask& fov, double step_mm, const SamplerParams& params,
                                            const std::optional<Vec3>& anchor = std::nullopt) {
  const Grid& g = fov.grid();
  const FovIntegral integral(fov);
  std::vector<Keypoint> out;
  for (const Vec3& p : lattice_candidates(fov, step_mm, anchor)) {
    const Index3 c = g.nearest_voxel(p);
    if (!g.contains(c[0], c[1], c[2])) continue;
    if (!patch_in_fov(integral, c, params.patch_size, params.fov_fraction)) continue;
    out.push_back(Keypoint::at(g, p, params.patch_size * g.spacing.mean(), 0.0));
  }
  require(!out.empty(), ErrorKind::degenerate, "no grid keypoint passes the FoV coverage test");
  return out;
}

}  // namespace xkey

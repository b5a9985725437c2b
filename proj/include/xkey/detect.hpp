#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "xkey/keypoint.hpp"
#include "xkey/volume.hpp"

namespace xkey {

/// Difference-of-Gaussians detector settings. Sigmas are in voxels of the
/// input grid.
struct DetectorParams {
  int n_octaves = 3;
  int scales_per_octave = 3;
  double base_sigma = 1.6;
  double contrast_threshold = 0.02;
  double edge_ratio_threshold = 10.0;

  void validate() const {
    require(n_octaves >= 1, ErrorKind::invalid_argument, "n_octaves must be >= 1");
    require(scales_per_octave >= 1, ErrorKind::invalid_argument, "scales_per_octave must be >= 1");
    require(base_sigma > 0.0, ErrorKind::invalid_argument, "base_sigma must be > 0");
    require(contrast_threshold >= 0.0 && edge_ratio_threshold >= 0.0, ErrorKind::invalid_argument,
            "detector thresholds must be >= 0");
  }
};

struct Octave {
  int index = 0;
  int factor = 1;             ///< voxel stride relative to the input grid
  std::vector<double> sigmas; ///< per Gaussian level, in octave voxels
  std::vector<Volume> gaussians;
  std::vector<Volume> dogs;
};

struct ScaleSpace {
  Grid input_grid;
  std::vector<Octave> octaves;
  std::vector<std::string> warnings;
};

/// Every other voxel, starting at voxel 0; spacing doubles and origin is kept.
inline Volume downsample2(const Volume& v) {
  Grid g = v.grid();
  for (int a = 0; a < 3; ++a) g.dims[a] = (g.dims[a] + 1) / 2;
  g.spacing *= 2.0;
  Volume out(g);
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) out(x, y, z) = v(2 * x, 2 * y, 2 * z);
  return out;
}

/// Per octave: scales_per_octave + 3 Gaussian levels at sigma_i = base * 2^(i/s)
/// and their adjacent differences. Octaves that would drop below 8 voxels per
/// axis are dropped with a warning.
inline ScaleSpace build_scale_space(const Volume& v, const DetectorParams& p) {
  p.validate();
  ScaleSpace ss;
  ss.input_grid = v.grid();
  const int s = p.scales_per_octave;
  const int levels = s + 3;

  Volume base = v;
  for (int o = 0; o < p.n_octaves; ++o) {
    if (o > 0) {
      base = downsample2(ss.octaves.back().gaussians[s]);
    }
    const auto& dims = base.dims();
    if (dims[0] < 8 || dims[1] < 8 || dims[2] < 8) {
      ss.warnings.push_back("octave " + std::to_string(o) + " skipped: grid smaller than 8 voxels per axis; using " +
                            std::to_string(o) + " octave(s)");
      break;
    }
    Octave oct;
    oct.index = o;
    oct.factor = 1 << o;
    for (int i = 0; i < levels; ++i) {
      const double sigma = p.base_sigma * std::pow(2.0, double(i) / s);
      oct.sigmas.push_back(sigma);
      // Octave 0 starts from the raw input; later octaves inherit blur = base_sigma.
      const double prior = o == 0 ? 0.0 : p.base_sigma;
      const double extra = std::sqrt(std::max(0.0, sigma * sigma - prior * prior));
      oct.gaussians.push_back(gaussian_smooth_voxels(base, Vec3::Constant(extra)));
    }
    for (int i = 0; i + 1 < levels; ++i) {
      Volume d(base.grid());
      const Volume& a = oct.gaussians[i];
      const Volume& b = oct.gaussians[i + 1];
      for (std::size_t k = 0; k < d.size(); ++k) d[k] = b[k] - a[k];
      oct.dogs.push_back(std::move(d));
    }
    ss.octaves.push_back(std::move(oct));
  }
  return ss;
}

namespace detail {

/// +1 strict maximum, -1 strict minimum, 0 otherwise (ties disqualify).
inline int strict_extremum(const std::vector<Volume>& dogs, int l, int x, int y, int z) {
  const float c = dogs[l](x, y, z);
  bool is_max = true, is_min = true;
  for (int dl = -1; dl <= 1; ++dl) {
    const Volume& d = dogs[l + dl];
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dl == 0 && dx == 0 && dy == 0 && dz == 0) continue;
          const float n = d(x + dx, y + dy, z + dz);
          if (n >= c) is_max = false;
          if (n <= c) is_min = false;
          if (!is_max && !is_min) return 0;
        }
  }
  return is_max ? 1 : -1;
}

inline Mat3 dog_hessian(const Volume& d, int x, int y, int z) {
  auto at = [&](int dx, int dy, int dz) { return double(d(x + dx, y + dy, z + dz)); };
  const double c = at(0, 0, 0);
  Mat3 h;
  h(0, 0) = at(1, 0, 0) - 2 * c + at(-1, 0, 0);
  h(1, 1) = at(0, 1, 0) - 2 * c + at(0, -1, 0);
  h(2, 2) = at(0, 0, 1) - 2 * c + at(0, 0, -1);
  h(0, 1) = h(1, 0) = 0.25 * (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0));
  h(0, 2) = h(2, 0) = 0.25 * (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1));
  h(1, 2) = h(2, 1) = 0.25 * (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1));
  return h;
}

}  // namespace detail

/// Blob-like curvature: all principal curvatures share a sign and
/// max|k| / min|k| <= ratio.
inline bool passes_edge_test(const Mat3& hessian, double ratio) {
  Eigen::SelfAdjointEigenSolver<Mat3> es(hessian, Eigen::EigenvaluesOnly);
  const Vec3 ev = es.eigenvalues();
  const bool same_sign = (ev.array() > 0.0).all() || (ev.array() < 0.0).all();
  if (!same_sign) return false;
  const Vec3 a = ev.cwiseAbs();
  return a.maxCoeff() <= ratio * a.minCoeff();
}

/// Strict scale-space extrema on the interior DoG levels, no sub-voxel refinement.
inline std::vector<Keypoint> detect_keypoints(const ScaleSpace& ss, const DetectorParams& p) {
  std::vector<Keypoint> out;
  const Grid& in = ss.input_grid;
  const double mean_spacing = in.spacing.mean();
  for (const Octave& oct : ss.octaves) {
    const auto& dims = oct.dogs.front().dims();
    for (int l = 1; l + 1 < static_cast<int>(oct.dogs.size()); ++l) {
      const Volume& d = oct.dogs[l];
      for (int z = 1; z < dims[2] - 1; ++z)
        for (int y = 1; y < dims[1] - 1; ++y)
          for (int x = 1; x < dims[0] - 1; ++x) {
            const float c = d(x, y, z);
            if (std::abs(c) < p.contrast_threshold || c == 0.0f) continue;
            if (detail::strict_extremum(oct.dogs, l, x, y, z) == 0) continue;
            if (!passes_edge_test(detail::dog_hessian(d, x, y, z), p.edge_ratio_threshold)) continue;
            Keypoint k = Keypoint::at(in, in.world(x * oct.factor, y * oct.factor, z * oct.factor),
                                      oct.sigmas[l] * oct.factor * mean_spacing, std::abs(c));
            k.octave = oct.index;
            out.push_back(k);
          }
    }
  }
  return out;
}

inline std::vector<Keypoint> detect_keypoints(const Volume& v, const DetectorParams& p) {
  return detect_keypoints(build_scale_space(v, p), p);
}

/// Binary mask with a 1 at the voxel nearest to each keypoint.
inline FovMask presence_mask(const std::vector<Keypoint>& kps, const Grid& grid) {
  FovMask m(grid, 0);
  for (const Keypoint& k : kps) {
    const Index3 v = grid.nearest_voxel(k.position_mm);
    require(grid.contains(v[0], v[1], v[2]), ErrorKind::out_of_bounds, "keypoint outside grid");
    m(v[0], v[1], v[2]) = 1;
  }
  return m;
}

}  // namespace xkey

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "xkey/random.hpp"
#include "xkey/volume.hpp"

namespace xkey {

/// Procedural stand-in for a pre-operative MR volume.
struct PhantomSpec {
  std::uint64_t seed = 1;
  Grid grid{{96, 96, 96}, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
  int n_structures = 6;
  double contrast_min = 0.35;
  double contrast_max = 0.95;
  /// Small Gaussian texture blobs per cubic millimetre.
  double detail_density = 1.0 / 1500.0;
};

/// Sphere sector: points within `radius` of `apex` and within `half_angle_deg` of `axis`.
struct FovSpec {
  Vec3 apex{48.0, 48.0, -6.0};
  Vec3 axis{0.0, 0.0, 1.0};
  double radius = 92.0;
  double half_angle_deg = 32.0;
};

struct SynthUsParams {
  double gamma = 1.0;
  double speckle_strength = 1.0;
  double blur_sigma = 0.8;
  double edge_gain = 2.0;
  std::uint64_t intensity_map_seed = 1;
  std::uint64_t speckle_seed = 2;
  bool identity_remap = false;
  FovSpec fov;
};

struct SynthItem {
  Volume volume;
  unsigned combination = 1;  ///< bitmask over the K sequence variants
  double gamma = 1.0;
  std::uint64_t seed = 0;
};

struct SynthDataset {
  std::vector<SynthItem> items;
  FovMask fov;
  std::size_t size() const { return items.size(); }
};

namespace detail {

inline double soft_inside(double signed_dist_mm, double width_mm) {
  return 1.0 / (1.0 + std::exp(signed_dist_mm / width_mm));
}

struct Ellipsoid {
  Vec3 center;
  Vec3 semi_axes;
  Mat3 rotation;  // world -> local
  double contrast;

  /// Approximate signed distance (mm): negative inside.
  double signed_distance(const Vec3& p) const {
    const Vec3 local = rotation * (p - center);
    const double r = local.cwiseQuotient(semi_axes).norm();
    return (r - 1.0) * semi_axes.minCoeff();
  }
};

inline void paint_ellipsoid(Volume& v, const Ellipsoid& e, double edge_mm) {
  const Grid& g = v.grid();
  const double reach = e.semi_axes.maxCoeff() + 4.0 * edge_mm;
  const Vec3 lo = g.continuous_index(e.center - Vec3::Constant(reach));
  const Vec3 hi = g.continuous_index(e.center + Vec3::Constant(reach));
  for (int z = std::max(0, int(std::floor(lo.z()))); z <= std::min(g.dims[2] - 1, int(std::ceil(hi.z()))); ++z)
    for (int y = std::max(0, int(std::floor(lo.y()))); y <= std::min(g.dims[1] - 1, int(std::ceil(hi.y()))); ++y)
      for (int x = std::max(0, int(std::floor(lo.x()))); x <= std::min(g.dims[0] - 1, int(std::ceil(hi.x()))); ++x) {
        const double a = soft_inside(e.signed_distance(g.world(x, y, z)), edge_mm);
        float& val = v(x, y, z);
        val = static_cast<float>(val + (e.contrast - val) * a);
      }
}

inline void add_blob(Volume& v, const Vec3& center, double sigma_mm, double amplitude) {
  const Grid& g = v.grid();
  const double reach = 3.0 * sigma_mm;
  const Vec3 lo = g.continuous_index(center - Vec3::Constant(reach));
  const Vec3 hi = g.continuous_index(center + Vec3::Constant(reach));
  for (int z = std::max(0, int(std::ceil(lo.z()))); z <= std::min(g.dims[2] - 1, int(std::floor(hi.z()))); ++z)
    for (int y = std::max(0, int(std::ceil(lo.y()))); y <= std::min(g.dims[1] - 1, int(std::floor(hi.y()))); ++y)
      for (int x = std::max(0, int(std::ceil(lo.x()))); x <= std::min(g.dims[0] - 1, int(std::floor(hi.x()))); ++x) {
        const double d2 = (g.world(x, y, z) - center).squaredNorm();
        v(x, y, z) = static_cast<float>(v(x, y, z) + amplitude * std::exp(-0.5 * d2 / (sigma_mm * sigma_mm)));
      }
}

/// Piecewise-linear map through (i/(n-1), knots[i]).
inline double piecewise_linear(const std::vector<double>& knots, double x) {
  const int segments = static_cast<int>(knots.size()) - 1;
  const double t = std::clamp(x, 0.0, 1.0) * segments;
  const int i = std::min(segments - 1, static_cast<int>(t));
  const double f = t - i;
  return knots[i] * (1.0 - f) + knots[i + 1] * f;
}

inline Volume apply_remap(const Volume& v, const std::vector<double>& knots) {
  Volume out(v.grid());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(piecewise_linear(knots, v[i]));
  return out;
}

}  // namespace detail

/// Phantom in [0,1]: textured background, `n_structures` smoothed ellipsoids (each
/// possibly carrying an overlapping inner core) and small Gaussian detail blobs.
inline Volume make_phantom(const PhantomSpec& spec) {
  spec.grid.validate();
  require(spec.n_structures >= 1, ErrorKind::invalid_argument, "n_structures must be >= 1");
  for (int a = 0; a < 3; ++a)
    require(spec.grid.dims[a] >= 8, ErrorKind::invalid_argument, "phantom dims must be >= 8");
  require(spec.contrast_min <= spec.contrast_max, ErrorKind::invalid_argument, "bad contrast range");

  Rng rng(mix_seed(spec.seed, 0x5EED));
  const Grid& g = spec.grid;
  const Vec3 extent = g.max_corner() - g.origin;
  Volume v(g, 0.0f);

  // Low-frequency background texture in roughly [0.06, 0.14].
  struct Wave { Vec3 k; double phase; };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    const Vec3 dir = random_unit_vector(rng);
    const double wavelength = uniform(rng, 0.3, 0.8) * extent.maxCoeff();
    waves.push_back({dir * (2.0 * std::numbers::pi / wavelength), uniform(rng, 0.0, 2.0 * std::numbers::pi)});
  }
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const Vec3 p = g.world(x, y, z);
        double t = 0.0;
        for (const Wave& w : waves) t += std::cos(w.k.dot(p) + w.phase);
        v(x, y, z) = static_cast<float>(0.10 + 0.01 * t);
      }

  // Non-touching outer structures (falls back to overlap if placement keeps failing).
  const double min_extent = extent.minCoeff();
  std::vector<std::pair<Vec3, double>> placed;
  std::vector<detail::Ellipsoid> shapes;
  for (int s = 0; s < spec.n_structures; ++s) {
    detail::Ellipsoid e{};
    for (int attempt = 0; attempt < 500; ++attempt) {
      e.semi_axes = Vec3(uniform(rng, 0.06, 0.15), uniform(rng, 0.06, 0.15), uniform(rng, 0.06, 0.15)) * min_extent;
      e.center = g.origin + Vec3(uniform(rng, 0.18, 0.82) * extent.x(), uniform(rng, 0.18, 0.82) * extent.y(),
                                 uniform(rng, 0.18, 0.82) * extent.z());
      const double r = e.semi_axes.maxCoeff();
      bool clear = true;
      for (const auto& [c, rr] : placed)
        if ((c - e.center).norm() < r + rr + 4.0) clear = false;
      if (clear) break;
    }
    e.rotation = random_rotation(rng, 180.0);
    e.contrast = uniform(rng, spec.contrast_min, spec.contrast_max);
    placed.emplace_back(e.center, e.semi_axes.maxCoeff());
    shapes.push_back(e);
    detail::paint_ellipsoid(v, e, 0.8);
    if (uniform(rng) < 0.7) {
      detail::Ellipsoid core = e;
      core.semi_axes = e.semi_axes * uniform(rng, 0.3, 0.6);
      core.center = e.center + e.rotation.transpose() *
                                   (random_unit_vector(rng).cwiseProduct(e.semi_axes) * uniform(rng, 0.0, 0.3));
      core.rotation = random_rotation(rng, 180.0);
      core.contrast = uniform(rng, 0.25, 1.0);
      detail::paint_ellipsoid(v, core, 0.8);
    }
  }

  const double volume_mm3 = extent.x() * extent.y() * extent.z();
  const int n_blobs = static_cast<int>(std::lround(volume_mm3 * spec.detail_density));
  for (int b = 0; b < n_blobs; ++b) {
    const Vec3 c = g.origin + Vec3(uniform(rng) * extent.x(), uniform(rng) * extent.y(), uniform(rng) * extent.z());
    const double sigma = uniform(rng, 1.2, 3.0);
    const double amp = uniform(rng, 0.05, 0.15) * (uniform(rng) < 0.5 ? -1.0 : 1.0);
    detail::add_blob(v, c, sigma, amp);
  }

  for (float& x : v.storage()) x = std::clamp(x, 0.0f, 1.0f);
  return v;
}

/// K contrast variants of one phantom standing in for MR sequences. Variant 0 is
/// the phantom itself; the others use random (generally non-monotone) remaps.
inline std::vector<Volume> make_sequence_variants(const Volume& phantom, int k, std::uint64_t seed) {
  require(k >= 1, ErrorKind::invalid_argument, "need at least one sequence variant");
  std::vector<Volume> out;
  out.push_back(phantom);
  for (int i = 1; i < k; ++i) {
    Rng rng(mix_seed(seed, 0xC0DE + i));
    std::vector<double> knots(6);
    for (double& y : knots) y = uniform(rng);
    out.push_back(normalize_intensity(detail::apply_remap(phantom, knots)));
  }
  return out;
}

inline FovMask make_fov_mask(const Grid& grid, const FovSpec& spec) {
  require(spec.radius > 0.0, ErrorKind::invalid_argument, "FoV radius must be positive");
  require(spec.axis.norm() > 0.0, ErrorKind::invalid_argument, "FoV axis must be nonzero");
  const Vec3 axis = spec.axis.normalized();
  const double cos_half = std::cos(std::clamp(spec.half_angle_deg, 0.0, 180.0) * std::numbers::pi / 180.0);
  FovMask m(grid, 0);
  std::size_t count = 0;
  for (int z = 0; z < grid.dims[2]; ++z)
    for (int y = 0; y < grid.dims[1]; ++y)
      for (int x = 0; x < grid.dims[0]; ++x) {
        const Vec3 d = grid.world(x, y, z) - spec.apex;
        const double r = d.norm();
        if (r > spec.radius) continue;
        if (r > 0.0 && d.dot(axis) < cos_half * r) continue;
        m(x, y, z) = 1;
        ++count;
      }
  require(count > 0, ErrorKind::degenerate, "FoV mask is empty");
  return m;
}

/// Random monotone piecewise-linear intensity map with strictly positive slopes.
inline std::vector<double> monotone_remap_knots(std::uint64_t seed, int segments = 8) {
  Rng rng(mix_seed(seed, 0xA11));
  std::vector<double> inc(segments);
  double sum = 0.0;
  for (double& d : inc) sum += (d = uniform(rng, 0.2, 1.8));
  std::vector<double> knots(segments + 1, 0.0);
  for (int i = 0; i < segments; ++i) knots[i + 1] = knots[i] + inc[i] / sum;
  return knots;
}

/// Multiplies by i.i.d. unit-mean gamma noise with the given variance.
inline Volume apply_speckle(const Volume& v, double variance, std::uint64_t seed) {
  require(variance >= 0.0, ErrorKind::invalid_argument, "speckle variance must be >= 0");
  if (variance == 0.0) return v;
  Rng rng(mix_seed(seed, 0x5BEC));
  std::gamma_distribution<double> noise(1.0 / variance, variance);
  Volume out(v.grid());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * noise(rng));
  return out;
}

inline Volume gradient_magnitude(const Volume& v) {
  const Grid& g = v.grid();
  Volume out(g);
  auto diff = [&](int x, int y, int z, int axis) {
    Index3 lo{x, y, z}, hi{x, y, z};
    lo[axis] = std::max(0, lo[axis] - 1);
    hi[axis] = std::min(g.dims[axis] - 1, hi[axis] + 1);
    const int span = hi[axis] - lo[axis];
    if (span == 0) return 0.0;
    return (double(v(hi[0], hi[1], hi[2])) - v(lo[0], lo[1], lo[2])) / (span * g.spacing[axis]);
  };
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        const double gx = diff(x, y, z, 0), gy = diff(x, y, z, 1), gz = diff(x, y, z, 2);
        out(x, y, z) = static_cast<float>(std::sqrt(gx * gx + gy * gy + gz * gz));
      }
  return out;
}

/// Procedural pseudo-ultrasound: remap, boundary brightening, speckle, blur,
/// FoV masking, renormalisation inside the FoV.
inline Volume synthesize_us(const Volume& mr, const SynthUsParams& p, const FovMask& fov) {
  require(p.gamma > 0.0, ErrorKind::invalid_argument, "gamma must be > 0");
  require(p.speckle_strength >= 0.0, ErrorKind::invalid_argument, "speckle_strength must be >= 0");
  require(p.blur_sigma >= 0.0, ErrorKind::invalid_argument, "blur_sigma must be >= 0");
  require_congruent(mr.grid(), fov.grid(), "synthesize_us");
  for (float x : mr.values())
    require(std::isfinite(x) && x >= 0.0f && x <= 1.0f, ErrorKind::invalid_argument,
            "synthesize_us expects an input normalized to [0,1]");

  Volume v = p.identity_remap ? mr : detail::apply_remap(mr, monotone_remap_knots(p.intensity_map_seed));
  if (p.edge_gain != 0.0) {
    const Volume grad = gradient_magnitude(v);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(v[i] + p.edge_gain * grad[i]);
  }
  v = apply_speckle(v, p.speckle_strength * p.gamma, p.speckle_seed);
  if (p.blur_sigma > 0.0) v = gaussian_smooth(v, p.blur_sigma);

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!fov[i]) {
      v[i] = 0.0f;
      continue;
    }
    lo = std::min(lo, double(v[i]));
    hi = std::max(hi, double(v[i]));
  }
  const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (fov[i]) v[i] = static_cast<float>(std::clamp((v[i] - lo) * scale, 0.0, 1.0));
  return v;
}

inline Volume synthesize_us(const Volume& mr, const SynthUsParams& p) {
  return synthesize_us(mr, p, make_fov_mask(mr.grid(), p.fov));
}

/// Voxelwise mean of the variants selected by `combination` (bitmask).
inline Volume fuse_variants(const std::vector<Volume>& variants, unsigned combination) {
  require(combination != 0, ErrorKind::invalid_argument, "empty variant combination");
  Volume out(variants.front().grid(), 0.0f);
  int n = 0;
  for (std::size_t k = 0; k < variants.size(); ++k) {
    if (!(combination & (1u << k))) continue;
    require_congruent(out.grid(), variants[k].grid(), "fuse_variants");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += variants[k][i];
    ++n;
  }
  for (float& x : out.storage()) x /= static_cast<float>(n);
  return out;
}

/// One pseudo-US volume per (non-empty subset of variants, gamma):
/// |gammas| x (2^K - 1) volumes.
inline SynthDataset build_synth_dataset(const std::vector<Volume>& variants,
                                        const std::vector<double>& gammas,
                                        const SynthUsParams& base, std::uint64_t seed) {
  require(!variants.empty(), ErrorKind::invalid_argument, "need K >= 1 sequence variants");
  require(variants.size() < 16, ErrorKind::invalid_argument, "too many sequence variants");
  require(!gammas.empty(), ErrorKind::invalid_argument, "gamma list is empty");
  SynthDataset ds;
  ds.fov = make_fov_mask(variants.front().grid(), base.fov);
  const unsigned n_comb = (1u << variants.size()) - 1u;
  for (unsigned comb = 1; comb <= n_comb; ++comb) {
    const Volume fused = fuse_variants(variants, comb);
    for (std::size_t gi = 0; gi < gammas.size(); ++gi) {
      SynthUsParams p = base;
      p.gamma = gammas[gi];
      const std::uint64_t item_seed = mix_seed(seed, comb * 64u + gi);
      p.intensity_map_seed = mix_seed(item_seed, 1);
      p.speckle_seed = mix_seed(item_seed, 2);
      ds.items.push_back({synthesize_us(fused, p, ds.fov), comb, gammas[gi], item_seed});
    }
  }
  return ds;
}

/// Writes each item as <dir>/us_NNN.rawv, the FoV as <dir>/fov.rawv and a
/// manifest with one `path k gamma seed` line per item (k = variant bitmask).
inline std::filesystem::path save_synth_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_volume(mask_to_volume(ds.fov), dir / "fov.rawv");
  const auto manifest = dir / "manifest.txt";
  std::ofstream out(manifest, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write manifest: " + manifest.string());
  out << "# path k gamma seed\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    std::ostringstream name;
    name << "us_" << std::setw(3) << std::setfill('0') << i << ".rawv";
    save_volume(ds.items[i].volume, dir / name.str());
    out << name.str() << ' ' << ds.items[i].combination << ' ' << ds.items[i].gamma << ' ' << ds.items[i].seed << '\n';
  }
  return manifest;
}

/// Reads a manifest written by save_synth_dataset; paths are relative to it.
inline SynthDataset load_synth_dataset(const std::filesystem::path& manifest) {
  require(std::filesystem::exists(manifest), ErrorKind::io, "missing dataset manifest: " + manifest.string());
  std::ifstream in(manifest);
  require(static_cast<bool>(in), ErrorKind::io, "cannot read dataset manifest: " + manifest.string());
  const auto dir = manifest.parent_path();
  SynthDataset ds;
  ds.fov = volume_to_mask(load_volume(dir / "fov.rawv"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    std::string path;
    SynthItem item;
    require(static_cast<bool>(row >> path >> item.combination >> item.gamma >> item.seed), ErrorKind::format,
            "malformed manifest line in " + manifest.string() + ": " + line);
    item.volume = load_volume(dir / path);
    require_congruent(ds.fov.grid(), item.volume.grid(), "dataset manifest");
    ds.items.push_back(std::move(item));
  }
  require(!ds.items.empty(), ErrorKind::format, "dataset manifest lists no volumes: " + manifest.string());
  return ds;
}

}  // namespace xkey

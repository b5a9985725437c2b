#pragma once

#include <algorithm>
#include <cmath>
#include <string_view>

#include "xkey/detect.hpp"
#include "xkey/synth.hpp"
#include "xkey/volume.hpp"

namespace xkey {

enum class SaliencyTag { us, mr, comb, res, fov_prior };

inline std::string_view to_string(SaliencyTag t) {
  switch (t) {
    case SaliencyTag::us: return "p_us";
    case SaliencyTag::mr: return "p_mr";
    case SaliencyTag::comb: return "p_comb";
    case SaliencyTag::res: return "p_res";
    case SaliencyTag::fov_prior: return "m_w";
  }
  return "unknown";
}

/// [0,1]-valued map on a volume grid.
struct SaliencyMap {
  Volume map;
  SaliencyTag tag = SaliencyTag::res;

  const Grid& grid() const { return map.grid(); }
};

struct HeatmapParams {
  DetectorParams detector;
  double smoothing_sigma_vox = 2.0;
};

namespace detail {

inline Volume min_max_or_zero(const Volume& v) {
  const auto [lo, hi] = std::minmax_element(v.values().begin(), v.values().end());
  if (!(*hi > *lo)) return Volume(v.grid(), 0.0f);
  return normalize_intensity(v);
}

inline SaliencyMap heatmap_from_counts(const Volume& counts, double sigma_vox, SaliencyTag tag) {
  const Volume smooth = gaussian_smooth_voxels(counts, Vec3::Constant(sigma_vox));
  SaliencyMap out{min_max_or_zero(smooth), tag};
  for (float& x : out.map.storage()) x = std::clamp(x, 0.0f, 1.0f);
  return out;
}

}  // namespace detail

/// Sum of presence masks (exact integer counts), smoothed, min-max normalised.
inline SaliencyMap heatmap_from_masks(const std::vector<FovMask>& masks, double sigma_vox, SaliencyTag tag) {
  require(!masks.empty(), ErrorKind::invalid_argument, "heatmap needs at least one presence mask");
  std::vector<std::uint32_t> counts(masks.front().size(), 0);
  for (const FovMask& m : masks) {
    require_congruent(masks.front().grid(), m.grid(), "heatmap");
    for (std::size_t i = 0; i < m.size(); ++i) counts[i] += m[i];
  }
  Volume c(masks.front().grid());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<float>(counts[i]);
  return detail::heatmap_from_counts(c, sigma_vox, tag);
}

inline SaliencyMap accumulate_us_heatmap(const SynthDataset& ds, const HeatmapParams& p) {
  require(!ds.items.empty(), ErrorKind::invalid_argument, "synthetic dataset is empty");
  std::vector<FovMask> masks;
  masks.reserve(ds.items.size());
  for (const SynthItem& item : ds.items) {
    require_congruent(ds.items.front().volume.grid(), item.volume.grid(), "accumulate_us_heatmap");
    masks.push_back(presence_mask(detect_keypoints(item.volume, p.detector), item.volume.grid()));
  }
  return heatmap_from_masks(masks, p.smoothing_sigma_vox, SaliencyTag::us);
}

inline SaliencyMap mr_heatmap(const Volume& mr, const HeatmapParams& p) {
  return heatmap_from_masks({presence_mask(detect_keypoints(mr, p.detector), mr.grid())}, p.smoothing_sigma_vox,
                            SaliencyTag::mr);
}

inline void require_unit_range(const SaliencyMap& m, const char* what) {
  for (float x : m.map.values())
    require(std::isfinite(x) && x >= 0.0f && x <= 1.0f, ErrorKind::invalid_argument,
            std::string(what) + ": values must lie in [0,1]");
}

/// 1 - (1 - a)(1 - b), voxelwise.
inline SaliencyMap probabilistic_or(const SaliencyMap& a, const SaliencyMap& b) {
  require_congruent(a.grid(), b.grid(), "probabilistic_or");
  require_unit_range(a, "probabilistic_or");
  require_unit_range(b, "probabilistic_or");
  SaliencyMap out{Volume(a.grid()), SaliencyTag::comb};
  for (std::size_t i = 0; i < out.map.size(); ++i) {
    const double x = a.map[i], y = b.map[i];
    out.map[i] = static_cast<float>(std::clamp(1.0 - (1.0 - x) * (1.0 - y), 0.0, 1.0));
  }
  return out;
}

inline Vec3 fov_centroid(const FovMask& fov) {
  const Grid& g = fov.grid();
  Vec3 sum = Vec3::Zero();
  std::size_t n = 0;
  for (std::size_t i = 0; i < fov.size(); ++i) {
    if (!fov[i]) continue;
    const Index3 c = g.coords(i);
    sum += g.world(c[0], c[1], c[2]);
    ++n;
  }
  require(n > 0, ErrorKind::degenerate, "FoV mask is empty");
  return sum / static_cast<double>(n);
}

/// Linear fall-off 1 - d/max_d from the FoV centre of mass (zero outside the
/// FoV) before smoothing.
inline Volume fov_distance_weight(const FovMask& fov) {
  const Grid& g = fov.grid();
  const Vec3 c = fov_centroid(fov);
  double max_d = 0.0;
  for (std::size_t i = 0; i < fov.size(); ++i)
    if (fov[i]) {
      const Index3 v = g.coords(i);
      max_d = std::max(max_d, (g.world(v[0], v[1], v[2]) - c).norm());
    }
  Volume w(g, 0.0f);
  for (std::size_t i = 0; i < fov.size(); ++i) {
    if (!fov[i]) continue;
    const Index3 v = g.coords(i);
    const double d = (g.world(v[0], v[1], v[2]) - c).norm();
    w[i] = static_cast<float>(max_d > 0.0 ? 1.0 - d / max_d : 1.0);
  }
  return w;
}

inline SaliencyMap fov_prior(const FovMask& fov, double prior_sigma_mm) {
  require(count_nonzero(fov) > 0, ErrorKind::degenerate, "FoV mask is empty");
  Volume w = gaussian_smooth(fov_distance_weight(fov), prior_sigma_mm);
  const float hi = *std::max_element(w.values().begin(), w.values().end());
  if (hi > 0.0f)
    for (float& x : w.storage()) x = std::clamp(x / hi, 0.0f, 1.0f);
  return {std::move(w), SaliencyTag::fov_prior};
}

inline SaliencyMap residual_saliency(const SaliencyMap& comb, const SaliencyMap& prior) {
  require_congruent(comb.grid(), prior.grid(), "residual_saliency");
  SaliencyMap out{Volume(comb.grid()), SaliencyTag::res};
  for (std::size_t i = 0; i < out.map.size(); ++i) out.map[i] = comb.map[i] * prior.map[i];
  return out;
}

/// All intermediate maps of the cross-modal saliency construction.
struct SaliencyStack {
  SaliencyMap p_us, p_mr, p_comb, m_w, p_res;
};

inline SaliencyStack build_saliency(const Volume& mr, const SynthDataset& ds, const HeatmapParams& hp,
                                    double prior_sigma_mm) {
  SaliencyStack s;
  s.p_us = accumulate_us_heatmap(ds, hp);
  s.p_mr = mr_heatmap(mr, hp);
  s.p_comb = probabilistic_or(s.p_mr, s.p_us);
  s.m_w = fov_prior(ds.fov, prior_sigma_mm);
  s.p_res = residual_saliency(s.p_comb, s.m_w);
  return s;
}

}  // namespace xkey

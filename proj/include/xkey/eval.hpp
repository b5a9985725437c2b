#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "xkey/match.hpp"
#include "xkey/nn.hpp"
#include "xkey/patch.hpp"
#include "xkey/random.hpp"
#include "xkey/sampler.hpp"
#include "xkey/saliency.hpp"

namespace xkey {

struct MatchMetrics {
  double precision = 0.0;       ///< percent of matches that are correct
  double matching_score = 0.0;  ///< percent of MR keypoints with a correct match
  std::size_t matched_points = 0;
  std::size_t n_matches = 0;
  std::size_t n_mr_keypoints = 0;
  bool empty = false;  ///< no matches: precision undefined, reported as 0
};

/// A match is correct iff |gt(p_mr) - p_us| <= tol, where gt maps MR to US coordinates.
inline bool match_correct(const Vec3& p_mr, const Vec3& p_us, const RigidTransform& gt, double tol) {
  return (gt(p_mr) - p_us).norm() <= tol;
}

inline MatchMetrics match_metrics(const MatchSet& matches, const std::vector<Keypoint>& mr_kps,
                                  const std::vector<Keypoint>& us_kps, const RigidTransform& gt, double tol,
                                  std::size_t n_mr_keypoints) {
  require(tol > 0.0, ErrorKind::invalid_argument, "tolerance must be > 0");
  MatchMetrics m;
  m.n_matches = matches.size();
  m.n_mr_keypoints = n_mr_keypoints;
  for (const Match& x : matches)
    if (match_correct(mr_kps.at(x.mr_index).position_mm, us_kps.at(x.us_index).position_mm, gt, tol))
      ++m.matched_points;
  m.empty = matches.empty();
  m.precision = m.empty ? 0.0 : 100.0 * static_cast<double>(m.matched_points) / static_cast<double>(m.n_matches);
  m.matching_score =
      n_mr_keypoints == 0 ? 0.0 : 100.0 * static_cast<double>(m.matched_points) / static_cast<double>(n_mr_keypoints);
  return m;
}

/// Mean |T(moving_k) - fixed_k|.
inline double tre(const std::vector<Vec3>& moving, const std::vector<Vec3>& fixed, const RigidTransform& t) {
  require(!moving.empty(), ErrorKind::invalid_argument, "TRE needs at least one landmark pair");
  require(moving.size() == fixed.size(), ErrorKind::invalid_argument, "landmark lists differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < moving.size(); ++i) s += (t(moving[i]) - fixed[i]).norm();
  return s / static_cast<double>(moving.size());
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  ///< sample standard deviation (0 for a single value)
};

inline MeanStd mean_std(std::span<const double> v) {
  require(!v.empty(), ErrorKind::invalid_argument, "mean_std needs at least one value");
  MeanStd r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct RepeatSummary {
  MeanStd precision, matching_score, matched_points;
  std::vector<MatchMetrics> runs;
};

/// Runs `experiment(seed_k)` for n seeds derived from `seed` and aggregates.
inline RepeatSummary repeat_eval(int n, std::uint64_t seed, const std::function<MatchMetrics(std::uint64_t)>& experiment) {
  require(n >= 1, ErrorKind::invalid_argument, "repeat count must be >= 1");
  RepeatSummary s;
  std::vector<double> p, ms, mp;
  for (int k = 0; k < n; ++k) {
    s.runs.push_back(experiment(mix_seed(seed, 0xE000 + static_cast<std::uint64_t>(k))));
    p.push_back(s.runs.back().precision);
    ms.push_back(s.runs.back().matching_score);
    mp.push_back(static_cast<double>(s.runs.back().matched_points));
  }
  s.precision = mean_std(p);
  s.matching_score = mean_std(ms);
  s.matched_points = mean_std(mp);
  return s;
}

/// Maps a batch of patches to descriptor columns.
using DescribeFn = std::function<DescriptorSet(std::span<const Patch>)>;

inline DescribeFn encoder_describer(const EncoderWeights<float>& w, int threads = 1) {
  return [&w, threads](std::span<const Patch> p) { return encode(w, p, threads); };
}

inline DescribeFn selfsim_describer() {
  return [](std::span<const Patch> p) { return selfsim_descriptors(p); };
}

struct EvalParams {
  std::size_t n_mr_keypoints = 1024;
  double grid_step_mm = 4.0;
  double ratio = default_ratio();
  double tolerance_mm = 2.5;
  SamplerParams sampler;
  int threads = 1;
};

/// The fixed side of a matching experiment: MR volume, its saliency and the
/// FoV used for the MR coverage test.
struct MrSide {
  const Volume* mr = nullptr;
  const SaliencyMap* p_res = nullptr;
  const FovMask* fov = nullptr;
};

struct MatchOutcome {
  std::vector<Keypoint> mr_kps, us_kps;
  MatchSet matches;
  MatchMetrics metrics;
};

inline std::vector<Keypoint> sample_mr_keypoints(const MrSide& side, const EvalParams& ep, std::uint64_t seed) {
  return sample_keypoints(*side.p_res, *side.fov, ep.n_mr_keypoints, ep.sampler, mix_seed(seed, 0xC1));
}

inline MatchOutcome evaluate_matching(const MrSide& side, const std::vector<Keypoint>& mr_kps,
                                      const DescriptorSet& mr_desc, const Volume& us, const FovMask& us_fov,
                                      const RigidTransform& gt, const DescribeFn& describe, const EvalParams& ep,
                                      const std::optional<Vec3>& lattice_anchor = std::nullopt) {
  require_congruent(side.mr->grid(), us.grid(), "evaluate_matching");
  MatchOutcome o;
  o.mr_kps = mr_kps;
  o.us_kps = grid_keypoints(us_fov, ep.grid_step_mm, ep.sampler, lattice_anchor);
  const auto us_patches = extract_patches(us, o.us_kps, ep.sampler.patch_size, Modality::us);
  const DescriptorSet du = describe(us_patches);
  o.matches = match_descriptors(mr_desc, du, ep.ratio, ep.threads);
  o.metrics = match_metrics(o.matches, o.mr_kps, o.us_kps, gt, ep.tolerance_mm, o.mr_kps.size());
  return o;
}

inline MatchOutcome evaluate_matching(const MrSide& side, const Volume& us, const FovMask& us_fov,
                                      const RigidTransform& gt, const DescribeFn& describe, const EvalParams& ep,
                                      std::uint64_t seed) {
  const auto mr_kps = sample_mr_keypoints(side, ep, seed);
  const auto mr_patches = extract_patches(*side.mr, mr_kps, ep.sampler.patch_size, Modality::mr);
  return evaluate_matching(side, mr_kps, describe(mr_patches), us, us_fov, gt, describe, ep);
}

struct SweepCell {
  double angle_deg = 0.0;
  int axis = 0;
  Vec3 axis_dir = Vec3::UnitZ();
  MatchMetrics metrics;
};

struct SweepRow {
  double angle_deg = 0.0;
  double precision = 0.0, matching_score = 0.0, matched_points = 0.0;  ///< means over axes
};

struct RotationSweep {
  std::vector<SweepCell> cells;
  std::vector<SweepRow> rows;
};

inline std::vector<double> default_sweep_angles() {
  std::vector<double> a;
  for (int k = 0; k <= 10; ++k) a.push_back(3.0 * k);
  return a;
}

/// Rotates the US volume (and its FoV) about the FoV centroid for each angle and
/// axis, rematches against a fixed MR keypoint set and averages over axes.
inline RotationSweep rotation_sweep(const MrSide& side, const Volume& us, const FovMask& us_fov,
                                    const DescribeFn& describe, const EvalParams& ep, std::uint64_t seed,
                                    const std::vector<double>& angles = default_sweep_angles(), int n_axes = 5) {
  require(n_axes >= 1 && !angles.empty(), ErrorKind::invalid_argument, "sweep needs angles and axes");
  Rng rng(mix_seed(seed, 0x505));
  std::vector<Vec3> axes;
  for (int k = 0; k < n_axes; ++k) axes.push_back(random_unit_vector(rng));
  const Vec3 center = fov_centroid(us_fov);
  const auto mr_kps = sample_mr_keypoints(side, ep, seed);
  const auto mr_patches = extract_patches(*side.mr, mr_kps, ep.sampler.patch_size, Modality::mr);
  const DescriptorSet mr_desc = describe(mr_patches);

  RotationSweep out;
  for (double angle : angles) {
    SweepRow row;
    row.angle_deg = angle;
    std::optional<MatchMetrics> unrotated;
    for (int k = 0; k < n_axes; ++k) {
      MatchMetrics m;
      if (angle == 0.0 && unrotated) {
        // Every axis sees the same unrotated volume.
        m = *unrotated;
      } else {
        const RigidTransform rot = RigidTransform::rotation_about(axes[k], angle * std::numbers::pi / 180.0, center);
        const RigidTransform gt = angle == 0.0 ? RigidTransform::identity() : rot;
        const Volume us_rot = resample_rigid(us, gt, us.grid());
        const FovMask fov_rot = resample_mask(us_fov, gt, us.grid());
        m = evaluate_matching(side, mr_kps, mr_desc, us_rot, fov_rot, gt, describe, ep).metrics;
        if (angle == 0.0) unrotated = m;
      }
      out.cells.push_back({angle, k, axes[k], m});
      row.precision += m.precision / n_axes;
      row.matching_score += m.matching_score / n_axes;
      row.matched_points += static_cast<double>(m.matched_points) / n_axes;
    }
    out.rows.push_back(row);
  }
  return out;
}

inline void save_sweep_csv(const RotationSweep& s, const std::filesystem::path& table,
                           const std::filesystem::path& plot_data) {
  std::ofstream t(table, std::ios::trunc);
  require(static_cast<bool>(t), ErrorKind::io, "cannot write sweep table: " + table.string());
  t << "angle_deg,axis,axis_x,axis_y,axis_z,precision,matching_score,matched_points,n_matches\n"
    << std::setprecision(9);
  for (const auto& c : s.cells)
    t << c.angle_deg << ',' << c.axis << ',' << c.axis_dir.x() << ',' << c.axis_dir.y() << ',' << c.axis_dir.z()
      << ',' << c.metrics.precision << ',' << c.metrics.matching_score << ',' << c.metrics.matched_points << ','
      << c.metrics.n_matches << '\n';
  std::ofstream p(plot_data, std::ios::trunc);
  require(static_cast<bool>(p), ErrorKind::io, "cannot write plot data: " + plot_data.string());
  p << "# angle_deg mean_precision mean_matching_score mean_matched_points\n" << std::setprecision(9);
  for (const auto& r : s.rows)
    p << r.angle_deg << ' ' << r.precision << ' ' << r.matching_score << ' ' << r.matched_points << '\n';
}

struct FovSweepReport {
  std::size_t common_voxels = 0;
  std::size_t reference_correct = 0;  ///< correct FoV-1 matches with the MR keypoint in the common region, all draws
  std::vector<std::size_t> reproduced;  ///< per other FoV, all draws
  std::vector<double> fraction;         ///< reproduced / reference_correct, per other FoV
  std::vector<MatchMetrics> metrics;    ///< per FoV, in input order, first draw
};

/// Consistency of matches across US acquisitions with different fields of view.
/// All FoVs share one lattice (anchored at FoV-1's bounding-box minimum). Each
/// of `draws` MR keypoint sets is matched against every FoV and the counts are
/// pooled. A keypoint is in the common region when its patch passes the
/// sampler's coverage test against the intersection of all FoVs. A correct
/// FoV-1 match whose MR keypoint is in the common region counts as reproduced
/// under FoV-k when the same MR keypoint is matched there to a US location
/// within `tolerance_mm` of its FoV-1 partner. Draw k uses the same seed as
/// repeat k of repeat_eval.
inline FovSweepReport fov_sweep(const MrSide& side, const std::vector<Volume>& us, const std::vector<FovMask>& fovs,
                                const RigidTransform& gt, const DescribeFn& describe, const EvalParams& ep,
                                std::uint64_t seed, int draws = 1) {
  require(fovs.size() >= 2 && us.size() == fovs.size(), ErrorKind::invalid_argument,
          "FoV sweep needs >= 2 FoVs with one US volume each");
  require(draws >= 1, ErrorKind::invalid_argument, "FoV sweep needs >= 1 draw");
  const Grid& g = fovs.front().grid();
  FovMask common(g, 1);
  for (const FovMask& f : fovs) {
    require_congruent(g, f.grid(), "fov_sweep");
    for (std::size_t i = 0; i < f.size(); ++i) common[i] = common[i] && f[i];
  }
  FovSweepReport rep;
  rep.common_voxels = count_nonzero(common);
  require(rep.common_voxels > 0, ErrorKind::invalid_argument, "FoVs are disjoint");

  const Vec3 anchor = fov_bounding_box(fovs.front()).min_mm;
  std::vector<std::vector<Keypoint>> us_kps;
  std::vector<DescriptorSet> us_desc;
  for (std::size_t k = 0; k < fovs.size(); ++k) {
    require_congruent(side.mr->grid(), us[k].grid(), "fov_sweep");
    us_kps.push_back(grid_keypoints(fovs[k], ep.grid_step_mm, ep.sampler, anchor));
    us_desc.push_back(describe(extract_patches(us[k], us_kps.back(), ep.sampler.patch_size, Modality::us)));
  }

  const FovIntegral common_integral(common);
  rep.reproduced.assign(fovs.size() - 1, 0);
  for (int d = 0; d < draws; ++d) {
    const auto mr_kps = sample_mr_keypoints(side, ep, mix_seed(seed, 0xE000 + static_cast<std::uint64_t>(d)));
    const DescriptorSet mr_desc = describe(extract_patches(*side.mr, mr_kps, ep.sampler.patch_size, Modality::mr));
    std::vector<MatchSet> runs;
    for (std::size_t k = 0; k < fovs.size(); ++k) {
      runs.push_back(match_descriptors(mr_desc, us_desc[k], ep.ratio, ep.threads));
      if (d == 0) rep.metrics.push_back(match_metrics(runs.back(), mr_kps, us_kps[k], gt, ep.tolerance_mm, mr_kps.size()));
    }
    auto partner = [&](std::size_t k, std::size_t mr_index) -> const Keypoint* {
      for (const Match& m : runs[k])
        if (m.mr_index == mr_index) return &us_kps[k][m.us_index];
      return nullptr;
    };
    for (const Match& m : runs.front()) {
      const Vec3& p_mr = mr_kps[m.mr_index].position_mm;
      const Vec3& p_us = us_kps.front()[m.us_index].position_mm;
      const Index3 v = g.nearest_voxel(p_mr);
      if (!g.contains(v[0], v[1], v[2]) ||
          !patch_in_fov(common_integral, v, ep.sampler.patch_size, ep.sampler.fov_fraction))
        continue;
      if (!match_correct(p_mr, p_us, gt, ep.tolerance_mm)) continue;
      ++rep.reference_correct;
      for (std::size_t k = 1; k < fovs.size(); ++k) {
        const Keypoint* q = partner(k, m.mr_index);
        if (q && (q->position_mm - p_us).norm() <= ep.tolerance_mm) ++rep.reproduced[k - 1];
      }
    }
  }
  for (std::size_t r : rep.reproduced)
    rep.fraction.push_back(rep.reference_correct == 0 ? 0.0
                                                      : static_cast<double>(r) / static_cast<double>(rep.reference_correct));
  return rep;
}

inline void save_metrics_csv(const std::vector<std::pair<std::string, MatchMetrics>>& rows,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write metrics: " + path.string());
  out << "name,precision,matching_score,matched_points,n_matches,n_mr_keypoints,empty\n" << std::setprecision(9);
  for (const auto& [name, m] : rows)
    out << name << ',' << m.precision << ',' << m.matching_score << ',' << m.matched_points << ',' << m.n_matches
        << ',' << m.n_mr_keypoints << ',' << (m.empty ? 1 : 0) << '\n';
}

}  // namespace xkey

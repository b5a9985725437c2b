#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xkey/match.hpp"
#include "xkey/nn.hpp"
#include "xkey/patch.hpp"
#include "xkey/random.hpp"
#include "xkey/sampler.hpp"
#include "xkey/saliency.hpp"
#include "xkey/volume.hpp"

namespace xkey {

/// Least-squares rigid fit T(src) ~ dst (no scaling), with reflection correction.
inline RigidTransform procrustes_rigid(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  require(src.size() == dst.size(), ErrorKind::invalid_argument, "point lists differ in length");
  require(src.size() >= 3, ErrorKind::invalid_argument, "rigid fit needs at least 3 point pairs");
  const double n = static_cast<double>(src.size());
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= n;
  cd /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();

  // Spread of the source set decides degeneracy: two vanishing principal axes
  // mean the points are (nearly) collinear or coincident.
  Mat3 cov = Mat3::Zero();
  for (const Vec3& p : src) cov += (p - cs) * (p - cs).transpose();
  const Eigen::JacobiSVD<Mat3> cov_svd(cov);
  const Vec3 sv = cov_svd.singularValues();
  require(sv[0] > 0.0 && sv[1] >= 1e-9 * sv[0], ErrorKind::degenerate,
          "degenerate point configuration for rigid fit");

  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  Mat3 r = v * d * u.transpose();
  r = RigidTransform::orthonormalize(r);
  return {r, cd - r * cs};
}

inline double residual_rms(const RigidTransform& t, const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                           const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i : idx) s += (t(src[i]) - dst[i]).squaredNorm();
  return std::sqrt(s / static_cast<double>(idx.size()));
}

struct RansacParams {
  int iterations = 4000;
  double inlier_mm = 5.0;
  bool adaptive = false;     ///< stop once the standard confidence bound is reached
  double confidence = 0.99;  ///< used only when adaptive
  std::uint64_t seed = 0;
};

struct RansacResult {
  RigidTransform transform;
  std::vector<std::size_t> inliers;
  std::size_t best_hypothesis = 0;
  int hypothesis_inliers = 0;  ///< inlier count of the winning minimal-sample hypothesis
  int iterations_run = 0;
};

namespace detail {

inline std::vector<std::size_t> inliers_of(const RigidTransform& t, const std::vector<Vec3>& src,
                                           const std::vector<Vec3>& dst, double thr) {
  std::vector<std::size_t> out;
  const double thr2 = thr * thr;
  for (std::size_t i = 0; i < src.size(); ++i)
    if ((t(src[i]) - dst[i]).squaredNorm() < thr2) out.push_back(i);
  return out;
}

}  // namespace detail

/// Minimal-sample (3 pairs) consensus. The winner is the hypothesis with the
/// most inliers, ties to the earliest. The result is the least-squares refit on
/// that inlier set, which is returned as `inliers`.
inline RansacResult ransac_rigid(const std::vector<Vec3>& src, const std::vector<Vec3>& dst, const RansacParams& p) {
  require(src.size() == dst.size(), ErrorKind::invalid_argument, "point lists differ in length");
  require(src.size() >= 3, ErrorKind::invalid_argument, "RANSAC needs at least 3 matches");
  require(p.iterations >= 1 && p.inlier_mm > 0.0, ErrorKind::invalid_argument,
          "RANSAC needs iterations >= 1 and inlier threshold > 0");
  const std::size_t n = src.size();
  Rng rng(mix_seed(p.seed, 0x4A5C));
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);

  RansacResult best;
  int best_count = -1;
  int budget = p.iterations;
  int it = 0;
  for (; it < budget; ++it) {
    std::size_t s[3];
    s[0] = pick(rng);
    do s[1] = pick(rng); while (s[1] == s[0]);
    do s[2] = pick(rng); while (s[2] == s[0] || s[2] == s[1]);
    RigidTransform t;
    try {
      t = procrustes_rigid({src[s[0]], src[s[1]], src[s[2]]}, {dst[s[0]], dst[s[1]], dst[s[2]]});
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::degenerate) continue;
      throw;
    }
    const auto inl = detail::inliers_of(t, src, dst, p.inlier_mm);
    const int count = static_cast<int>(inl.size());
    if (count > best_count) {
      best_count = count;
      best.inliers = inl;
      best.best_hypothesis = static_cast<std::size_t>(it);
      if (p.adaptive && count > 0) {
        const double w = static_cast<double>(count) / static_cast<double>(n);
        const double denom = std::log(std::max(1e-300, 1.0 - w * w * w));
        if (denom < 0.0) {
          const double need = std::ceil(std::log(1.0 - p.confidence) / denom);
          budget = std::min(p.iterations, std::max(it + 1, static_cast<int>(std::min(need, 1e9))));
        }
      }
    }
  }
  best.iterations_run = it;
  require(best_count >= 3, ErrorKind::degenerate, "no RANSAC hypothesis reached 3 inliers");
  best.hypothesis_inliers = best_count;
  // Always refit: a hypothesis can be off by up to inlier_mm and still win by
  // absorbing a stray outlier; least squares over the set pulls it back.
  std::vector<Vec3> a, b;
  for (std::size_t i : best.inliers) {
    a.push_back(src[i]);
    b.push_back(dst[i]);
  }
  best.transform = procrustes_rigid(a, b);
  return best;
}

struct RegisterParams {
  int rounds = 3;
  std::size_t n_mr_keypoints = 1024;
  double grid_step_mm = 4.0;
  double ratio = default_ratio();
  RansacParams ransac;
  SamplerParams sampler;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct RoundLog {
  int round = 0;
  std::size_t n_matches = 0;
  std::size_t n_inliers = 0;
  double rms_mm = 0.0;
  RigidTransform transform;  ///< this round's update
};

enum class RegisterStatus { ok, warning };

struct RegisterResult {
  RigidTransform transform;  ///< maps moving (US) coordinates to fixed (MR) coordinates
  std::vector<RoundLog> rounds;
  RegisterStatus status = RegisterStatus::ok;
  std::string message;
};

inline void save_register_log(const RegisterResult& r, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write registration log: " + path.string());
  out << "round,n_matches,n_inliers,rms_mm\n" << std::setprecision(9);
  for (const auto& l : r.rounds) out << l.round << ',' << l.n_matches << ',' << l.n_inliers << ',' << l.rms_mm << '\n';
}

/// Iterative keypoint registration of a moving US volume to the MR volume.
/// Each round samples MR keypoints from P_res (coverage against `mr_fov`),
/// places grid keypoints in the current US FoV, matches, fits with RANSAC and
/// composes the update; the US volume and its FoV are resampled accordingly.
inline RegisterResult iterative_register(const Volume& mr, const Volume& us, const EncoderWeights<float>& w,
                                         const SaliencyMap& p_res, const FovMask& mr_fov, const FovMask& us_fov,
                                         const RegisterParams& rp) {
  require(rp.rounds >= 0, ErrorKind::invalid_argument, "rounds must be >= 0");
  require_congruent(mr.grid(), us.grid(), "iterative_register");
  require_congruent(mr.grid(), us_fov.grid(), "iterative_register");
  const int s = w.config.patch_size;
  SamplerParams sp = rp.sampler;
  sp.patch_size = s;

  RegisterResult res;
  for (int r = 0; r < rp.rounds; ++r) {
    const Volume us_cur = resample_rigid(us, res.transform, mr.grid());
    const FovMask fov_cur = resample_mask(us_fov, res.transform, mr.grid());
    if (count_nonzero(fov_cur) == 0) {
      res.status = RegisterStatus::warning;
      res.message = "round " + std::to_string(r + 1) + ": moving FoV left the grid";
      break;
    }
    const auto mr_kps = sample_keypoints(p_res, mr_fov, rp.n_mr_keypoints, sp, mix_seed(rp.seed, 0xA0 + r));
    std::vector<Keypoint> us_kps;
    try {
      us_kps = grid_keypoints(fov_cur, rp.grid_step_mm, sp);
    } catch (const Error& e) {
      res.status = RegisterStatus::warning;
      res.message = "round " + std::to_string(r + 1) + ": " + e.what();
      break;
    }
    const auto mr_patches = extract_patches(mr, mr_kps, s, Modality::mr);
    const auto us_patches = extract_patches(us_cur, us_kps, s, Modality::us);
    const DescriptorSet dm = encode(w, mr_patches, rp.threads);
    const DescriptorSet du = encode(w, us_patches, rp.threads);
    if (du.cols() < 2) {
      res.status = RegisterStatus::warning;
      res.message = "round " + std::to_string(r + 1) + ": fewer than 2 US keypoints";
      break;
    }
    const MatchSet m = match_descriptors(dm, du, rp.ratio, rp.threads);
    RoundLog log;
    log.round = r + 1;
    log.n_matches = m.size();
    if (m.size() < 3) {
      res.rounds.push_back(log);
      res.status = RegisterStatus::warning;
      res.message = "round " + std::to_string(r + 1) + ": only " + std::to_string(m.size()) + " matches";
      break;
    }
    const PointPairs pts = matched_points(m, mr_kps, us_kps);
    RansacParams rsp = rp.ransac;
    rsp.seed = mix_seed(rp.ransac.seed ^ rp.seed, 0xB0 + r);
    RansacResult rr;
    try {
      rr = ransac_rigid(pts.us, pts.mr, rsp);
    } catch (const Error& e) {
      res.rounds.push_back(log);
      res.status = RegisterStatus::warning;
      res.message = "round " + std::to_string(r + 1) + ": " + e.what();
      break;
    }
    log.n_inliers = rr.inliers.size();
    log.rms_mm = residual_rms(rr.transform, pts.us, pts.mr, rr.inliers);
    log.transform = rr.transform;
    res.rounds.push_back(log);
    res.transform = compose(rr.transform, res.transform);
  }
  return res;
}

}  // namespace xkey

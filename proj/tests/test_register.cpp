#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "xkey/register.hpp"
#include "xkey/synth.hpp"

namespace xkey {
namespace {

std::vector<Vec3> random_points(Rng& rng, std::size_t n, double extent) {
  std::vector<Vec3> p;
  for (std::size_t i = 0; i < n; ++i) p.emplace_back(uniform(rng, 0, extent), uniform(rng, 0, extent), uniform(rng, 0, extent));
  return p;
}

std::vector<Vec3> transformed(const RigidTransform& t, const std::vector<Vec3>& p) {
  std::vector<Vec3> out;
  for (const Vec3& x : p) out.push_back(t(x));
  return out;
}

/// Largest displacement between two transforms over a point set.
double max_disagreement(const RigidTransform& a, const RigidTransform& b, const std::vector<Vec3>& p) {
  double m = 0.0;
  for (const Vec3& x : p) m = std::max(m, (a(x) - b(x)).norm());
  return m;
}

TEST(Procrustes, RecoversExactTransform) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const RigidTransform t = random_rigid(rng, 180.0, 50.0, Vec3(20, 20, 20));
    const auto src = random_points(rng, 3 + trial % 20, 60.0);
    const RigidTransform f = procrustes_rigid(src, transformed(t, src));
    EXPECT_LT((f.rotation() - t.rotation()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((f.translation() - t.translation()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(f.rotation().determinant(), 1.0, 1e-12);
  }
}

TEST(Procrustes, NeverReturnsReflection) {
  // Mirrored targets: the best proper rotation is still a rotation.
  Rng rng(2);
  const auto src = random_points(rng, 12, 30.0);
  std::vector<Vec3> dst;
  for (const Vec3& p : src) dst.emplace_back(-p.x(), p.y(), p.z());
  const RigidTransform f = procrustes_rigid(src, dst);
  EXPECT_NEAR(f.rotation().determinant(), 1.0, 1e-9);
  EXPECT_TRUE(RigidTransform::is_rotation(f.rotation(), 1e-9));
}

TEST(Procrustes, RejectsDegenerateAndMismatchedInput) {
  auto kind = [](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io;  // sentinel: nothing thrown
  };
  const std::vector<Vec3> line{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}, {5, 5, 5}};
  EXPECT_EQ(kind([&] { procrustes_rigid(line, line); }), ErrorKind::degenerate);
  const std::vector<Vec3> same{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
  EXPECT_EQ(kind([&] { procrustes_rigid(same, same); }), ErrorKind::degenerate);
  const std::vector<Vec3> two{{0, 0, 0}, {1, 0, 0}};
  EXPECT_EQ(kind([&] { procrustes_rigid(two, two); }), ErrorKind::invalid_argument);
  const std::vector<Vec3> tri{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  EXPECT_EQ(kind([&] { procrustes_rigid(tri, line); }), ErrorKind::invalid_argument);
  // Three non-collinear points are enough.
  EXPECT_NO_THROW(procrustes_rigid(tri, tri));
}

TEST(Ransac, AllInliersGiveExactFit) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const RigidTransform t = random_rigid(rng, 30.0, 20.0);
    const auto src = random_points(rng, 40, 80.0);
    RansacParams p;
    p.iterations = 200;
    p.seed = static_cast<std::uint64_t>(trial);
    const RansacResult r = ransac_rigid(src, transformed(t, src), p);
    EXPECT_EQ(r.inliers.size(), src.size());
    EXPECT_LT(max_disagreement(r.transform, t, src), 1e-6);
  }
}

/// 70 noisy inliers plus 30 uniform outliers; the fit must agree with the truth
/// to within 1 mm over the inlier points.
TEST(Ransac, SurvivesThirtyPercentOutliers) {
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(mix_seed(77, static_cast<std::uint64_t>(trial)));
    const RigidTransform t = random_rigid(rng, 10.0, 10.0, Vec3(48, 48, 48));
    const auto inl = random_points(rng, 70, 96.0);
    std::vector<Vec3> src = inl, dst;
    std::normal_distribution<double> noise(0.0, 0.3);
    for (const Vec3& x : inl) dst.push_back(t(x) + Vec3(noise(rng), noise(rng), noise(rng)));
    for (int k = 0; k < 30; ++k) {
      src.push_back(random_points(rng, 1, 96.0)[0]);
      dst.push_back(random_points(rng, 1, 96.0)[0]);
    }
    RansacParams p;
    p.iterations = 4000;
    p.inlier_mm = 5.0;
    p.seed = static_cast<std::uint64_t>(trial);
    const RansacResult r = ransac_rigid(src, dst, p);
    ok += max_disagreement(r.transform, t, inl) < 1.0;
  }
  EXPECT_GE(ok, 95);
}

TEST(Ransac, WinnerHasMostInliersOfAllTriples) {
  // With 8 pairs every triple is drawn w.h.p. in 4000 iterations, so the winning
  // hypothesis must reach the brute-force maximum.
  Rng rng(4);
  const RigidTransform t = random_rigid(rng, 20.0, 5.0);
  auto src = random_points(rng, 8, 40.0);
  auto dst = transformed(t, src);
  dst[1] += Vec3(15, 0, 0);
  dst[5] += Vec3(0, -12, 3);
  dst[6] += Vec3(4, 4, 4);
  const double thr = 2.0;
  int brute = 0;
  for (int a = 0; a < 8; ++a)
    for (int b = a + 1; b < 8; ++b)
      for (int c = b + 1; c < 8; ++c) {
        RigidTransform h;
        try {
          h = procrustes_rigid(std::vector<Vec3>{src[a], src[b], src[c]}, std::vector<Vec3>{dst[a], dst[b], dst[c]});
        } catch (const Error&) {
          continue;
        }
        int count = 0;
        for (int i = 0; i < 8; ++i) count += (h(src[i]) - dst[i]).norm() < thr;
        brute = std::max(brute, count);
      }
  RansacParams p;
  p.inlier_mm = thr;
  const RansacResult r = ransac_rigid(src, dst, p);
  EXPECT_EQ(r.hypothesis_inliers, brute);
  EXPECT_GE(static_cast<int>(r.inliers.size()), r.hypothesis_inliers);
  EXPECT_EQ(r.iterations_run, 4000);
}

TEST(Ransac, RefitIsLeastSquaresOnReturnedInliers) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    Rng rng(seed);
    const RigidTransform t = random_rigid(rng, 10.0, 10.0, Vec3(48, 48, 48));
    std::vector<Vec3> src, dst;
    for (int i = 0; i < 35; ++i) {
      src.push_back(Vec3(uniform(rng, 0, 96), uniform(rng, 0, 96), uniform(rng, 0, 96)));
      dst.push_back(t(src.back()));
    }
    // Outliers placed 3-7 mm off, where a slightly wrong hypothesis can absorb them.
    for (int i = 0; i < 15; ++i) {
      src.push_back(Vec3(uniform(rng, 0, 96), uniform(rng, 0, 96), uniform(rng, 0, 96)));
      dst.push_back(t(src.back()) + random_unit_vector(rng) * uniform(rng, 3.0, 7.0));
    }
    RansacParams p;
    p.iterations = 500;
    p.seed = seed;
    const RansacResult r = ransac_rigid(src, dst, p);
    EXPECT_EQ(static_cast<int>(r.inliers.size()), r.hypothesis_inliers);
    EXPECT_LE(residual_rms(r.transform, src, dst, r.inliers), residual_rms(t, src, dst, r.inliers) + 1e-9)
        << "seed " << seed;
  }
}

TEST(Ransac, DeterministicPerSeed) {
  Rng rng(5);
  const auto src = random_points(rng, 30, 50.0);
  const auto dst = random_points(rng, 30, 50.0);
  RansacParams p;
  p.iterations = 300;
  p.inlier_mm = 10.0;
  p.seed = 9;
  const RansacResult a = ransac_rigid(src, dst, p);
  const RansacResult b = ransac_rigid(src, dst, p);
  EXPECT_EQ(a.inliers, b.inliers);
  EXPECT_EQ(a.best_hypothesis, b.best_hypothesis);
  EXPECT_EQ(a.transform.rotation(), b.transform.rotation());
  EXPECT_EQ(a.transform.translation(), b.transform.translation());
}

TEST(Ransac, AdaptiveStopsEarlyOnCleanData) {
  Rng rng(6);
  const RigidTransform t = random_rigid(rng, 30.0, 20.0);
  const auto src = random_points(rng, 50, 60.0);
  RansacParams p;
  p.adaptive = true;
  const RansacResult r = ransac_rigid(src, transformed(t, src), p);
  EXPECT_LT(r.iterations_run, 10);
  EXPECT_LT(max_disagreement(r.transform, t, src), 1e-6);
}

TEST(Ransac, RejectsBadInput) {
  const std::vector<Vec3> two{{0, 0, 0}, {1, 0, 0}};
  EXPECT_THROW(ransac_rigid(two, two, {}), Error);
  const std::vector<Vec3> tri{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  RansacParams p;
  p.iterations = 0;
  EXPECT_THROW(ransac_rigid(tri, tri, p), Error);
  p.iterations = 10;
  p.inlier_mm = 0.0;
  EXPECT_THROW(ransac_rigid(tri, tri, p), Error);
}

struct SmallScene {
  Volume mr;
  FovMask fov;
  SaliencyMap p_res;
  EncoderWeights<float> w;
};

SmallScene small_scene() {
  SmallScene s;
  PhantomSpec ps;
  ps.grid = Grid{{48, 48, 48}, {1, 1, 1}, {0, 0, 0}};
  ps.n_structures = 4;
  ps.seed = 3;
  s.mr = make_phantom(ps);
  s.fov = make_fov_mask(ps.grid, FovSpec{{24, 24, -4}, {0, 0, 1}, 50, 40});
  s.p_res.map = mask_to_volume(s.fov);
  EncoderConfig ec;
  ec.widths = {4, 8};
  ec.descriptor_dim = 16;
  s.w = init_encoder<float>(ec, 5);
  return s;
}

RegisterParams small_params() {
  RegisterParams rp;
  rp.n_mr_keypoints = 48;
  rp.grid_step_mm = 6.0;
  rp.ratio = 0.95;
  rp.ransac.iterations = 300;
  rp.sampler.min_dist_mm = 2.0;
  rp.seed = 11;
  return rp;
}

TEST(IterativeRegister, ZeroRoundsGiveIdentity) {
  const SmallScene s = small_scene();
  RegisterParams rp = small_params();
  rp.rounds = 0;
  const RegisterResult r = iterative_register(s.mr, s.mr, s.w, s.p_res, s.fov, s.fov, rp);
  EXPECT_TRUE(r.transform.is_identity());
  EXPECT_TRUE(r.rounds.empty());
  EXPECT_EQ(r.status, RegisterStatus::ok);
  rp.rounds = -1;
  EXPECT_THROW(iterative_register(s.mr, s.mr, s.w, s.p_res, s.fov, s.fov, rp), Error);
}

TEST(IterativeRegister, CumulativeTransformComposesRoundUpdates) {
  const SmallScene s = small_scene();
  const RigidTransform t0 = RigidTransform::translation({2.0, -1.0, 1.5});
  const Volume moving = resample_rigid(s.mr, t0, s.mr.grid());
  const FovMask moving_fov = resample_mask(s.fov, t0, s.mr.grid());
  const RegisterResult r = iterative_register(s.mr, moving, s.w, s.p_res, s.fov, moving_fov, small_params());
  ASSERT_FALSE(r.rounds.empty());
  RigidTransform acc;
  for (const RoundLog& l : r.rounds) {
    if (l.n_inliers == 0) continue;  // a round that stopped before fitting contributes nothing
    acc = compose(l.transform, acc);
  }
  EXPECT_LT((acc.rotation() - r.transform.rotation()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((acc.translation() - r.transform.translation()).cwiseAbs().maxCoeff(), 1e-9);
  for (std::size_t k = 0; k < r.rounds.size(); ++k) EXPECT_EQ(r.rounds[k].round, static_cast<int>(k + 1));

  const RegisterResult again = iterative_register(s.mr, moving, s.w, s.p_res, s.fov, moving_fov, small_params());
  EXPECT_EQ(again.transform.rotation(), r.transform.rotation());
  EXPECT_EQ(again.transform.translation(), r.transform.translation());
}

TEST(IterativeRegister, LogCsvLayout) {
  RegisterResult r;
  RoundLog l;
  l.round = 1;
  l.n_matches = 10;
  l.n_inliers = 7;
  l.rms_mm = 0.5;
  r.rounds.push_back(l);
  testing::TempDir dir("reglog");
  save_register_log(r, dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "round,n_matches,n_inliers,rms_mm");
  EXPECT_EQ(row, "1,10,7,0.5");
}

}  // namespace
}  // namespace xkey

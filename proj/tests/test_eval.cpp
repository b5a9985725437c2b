#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "xkey/eval.hpp"
#include "xkey/synth.hpp"

namespace xkey {
namespace {

const Grid kGrid{{50, 50, 50}, {1, 1, 1}, {0, 0, 0}};

std::vector<Keypoint> kps_at(std::initializer_list<Vec3> ps) {
  std::vector<Keypoint> out;
  for (const Vec3& p : ps) out.push_back(Keypoint::at(kGrid, p));
  return out;
}

TEST(Metrics, CountsCorrectMatchesAtTolerance) {
  const auto mr = kps_at({{10, 10, 10}, {20, 20, 20}, {30, 30, 30}, {40, 40, 40}});
  // Offsets 0, 2.5 (boundary, counts), 2.6 and 1.0 mm.
  const auto us = kps_at({{10, 10, 10}, {22.5, 20, 20}, {30, 32.6, 30}, {40, 40, 41}});
  const MatchSet m{{0, 0, 0, 0}, {1, 1, 0, 0}, {2, 2, 0, 0}, {3, 3, 0, 0}};
  const MatchMetrics r = match_metrics(m, mr, us, RigidTransform::identity(), 2.5, 10);
  EXPECT_EQ(r.n_matches, 4u);
  EXPECT_EQ(r.matched_points, 3u);
  EXPECT_DOUBLE_EQ(r.precision, 75.0);
  EXPECT_DOUBLE_EQ(r.matching_score, 30.0);
  EXPECT_FALSE(r.empty);
}

TEST(Metrics, GroundTruthMapsMrToUs) {
  const auto mr = kps_at({{10, 10, 10}});
  const auto us = kps_at({{15, 10, 10}});
  const MatchSet m{{0, 0, 0, 0}};
  EXPECT_EQ(match_metrics(m, mr, us, RigidTransform::identity(), 2.5, 1).matched_points, 0u);
  EXPECT_EQ(match_metrics(m, mr, us, RigidTransform::translation({5, 0, 0}), 2.5, 1).matched_points, 1u);
  EXPECT_EQ(match_metrics(m, mr, us, RigidTransform::translation({-5, 0, 0}), 2.5, 1).matched_points, 0u);
}

TEST(Metrics, EmptyMatchSet) {
  const MatchMetrics r = match_metrics({}, {}, {}, RigidTransform::identity(), 2.5, 5);
  EXPECT_TRUE(r.empty);
  EXPECT_EQ(r.precision, 0.0);
  EXPECT_EQ(r.matching_score, 0.0);
  EXPECT_THROW(match_metrics({}, {}, {}, RigidTransform::identity(), 0.0, 5), Error);
}

TEST(Tre, MeanLandmarkDistance) {
  const std::vector<Vec3> fixed{{0, 0, 0}, {10, 0, 0}};
  const std::vector<Vec3> moving{{3, 4, 0}, {13, 4, 0}};
  EXPECT_DOUBLE_EQ(tre(moving, fixed, RigidTransform::identity()), 5.0);
  EXPECT_NEAR(tre(moving, fixed, RigidTransform::translation({-3, -4, 0})), 0.0, 1e-12);
  const std::vector<Vec3> mixed{{0, 0, 1}, {10, 0, 3}};
  EXPECT_DOUBLE_EQ(tre(mixed, fixed, RigidTransform::identity()), 2.0);
  EXPECT_THROW(tre({}, {}, RigidTransform::identity()), Error);
  EXPECT_THROW(tre(moving, {fixed[0]}, RigidTransform::identity()), Error);
}

TEST(Repeats, MeanAndSampleStd) {
  const std::vector<double> v{1, 2, 3, 4};
  const MeanStd s = mean_std(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-12);
  const std::vector<double> one{7};
  EXPECT_EQ(mean_std(one).std, 0.0);
  EXPECT_THROW(mean_std(std::vector<double>{}), Error);
}

TEST(Repeats, DistinctSeedsAndAggregation) {
  std::vector<std::uint64_t> seeds;
  const RepeatSummary s = repeat_eval(4, 9, [&](std::uint64_t seed) {
    seeds.push_back(seed);
    MatchMetrics m;
    m.precision = 10.0 * static_cast<double>(seeds.size());
    m.matched_points = seeds.size();
    return m;
  });
  ASSERT_EQ(seeds.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_NE(seeds[i], seeds[j]);
  EXPECT_DOUBLE_EQ(s.precision.mean, 25.0);
  EXPECT_DOUBLE_EQ(s.matched_points.mean, 2.5);
  EXPECT_EQ(s.runs.size(), 4u);
  EXPECT_THROW(repeat_eval(0, 1, [](std::uint64_t) { return MatchMetrics{}; }), Error);
}

struct Scene {
  Volume mr;
  FovMask fov;
  SaliencyMap p_res;
  EvalParams ep;
  MrSide side() const { return {&mr, &p_res, &fov}; }
};

Scene scene() {
  Scene s;
  PhantomSpec ps;
  ps.grid = kGrid;
  ps.n_structures = 4;
  ps.seed = 6;
  s.mr = make_phantom(ps);
  s.fov = make_fov_mask(kGrid, FovSpec{{25, 25, -5}, {0, 0, 1}, 60, 35});
  s.p_res.map = mask_to_volume(s.fov);
  s.ep.n_mr_keypoints = 40;
  s.ep.grid_step_mm = 4.0;
  s.ep.sampler.min_dist_mm = 3.0;
  return s;
}

TEST(RotationSweep, ZeroAngleRowEqualsPlainEvaluation) {
  const Scene s = scene();
  const DescribeFn d = selfsim_describer();
  const RotationSweep sw = rotation_sweep(s.side(), s.mr, s.fov, d, s.ep, 3, {0.0, 6.0}, 2);
  ASSERT_EQ(sw.rows.size(), 2u);
  ASSERT_EQ(sw.cells.size(), 4u);
  const MatchOutcome base = evaluate_matching(s.side(), s.mr, s.fov, RigidTransform::identity(), d, s.ep, 3);
  EXPECT_DOUBLE_EQ(sw.rows[0].precision, base.metrics.precision);
  EXPECT_DOUBLE_EQ(sw.rows[0].matching_score, base.metrics.matching_score);
  EXPECT_DOUBLE_EQ(sw.rows[0].matched_points, static_cast<double>(base.metrics.matched_points));
  // Same modality, same volume: every match sits on the right lattice point.
  EXPECT_GT(base.metrics.matched_points, 0u);
  EXPECT_EQ(sw.cells[2].angle_deg, 6.0);
  EXPECT_NE(sw.cells[2].axis_dir, sw.cells[3].axis_dir);
  EXPECT_EQ(default_sweep_angles().size(), 11u);
  EXPECT_EQ(default_sweep_angles().back(), 30.0);

  testing::TempDir dir("sweep");
  save_sweep_csv(sw, dir / "t.csv", dir / "p.dat");
  std::ifstream t(dir / "t.csv"), p(dir / "p.dat");
  std::string ht, hp;
  std::getline(t, ht);
  std::getline(p, hp);
  EXPECT_EQ(ht, "angle_deg,axis,axis_x,axis_y,axis_z,precision,matching_score,matched_points,n_matches");
  EXPECT_EQ(hp, "# angle_deg mean_precision mean_matching_score mean_matched_points");
  int rows = 0;
  for (std::string line; std::getline(t, line);) ++rows;
  EXPECT_EQ(rows, 4);
}

TEST(FovSweep, IdenticalFovsReproduceEverything) {
  const Scene s = scene();
  const FovSweepReport r = fov_sweep(s.side(), {s.mr, s.mr, s.mr}, {s.fov, s.fov, s.fov}, RigidTransform::identity(),
                                     selfsim_describer(), s.ep, 4);
  EXPECT_EQ(r.common_voxels, count_nonzero(s.fov));
  ASSERT_GT(r.reference_correct, 0u);
  ASSERT_EQ(r.fraction.size(), 2u);
  EXPECT_DOUBLE_EQ(r.fraction[0], 1.0);
  EXPECT_DOUBLE_EQ(r.fraction[1], 1.0);
  EXPECT_EQ(r.metrics.size(), 3u);
}

TEST(FovSweep, NestedAndDisjointFovs) {
  const Scene s = scene();
  const FovMask inner = make_fov_mask(kGrid, FovSpec{{25, 25, -5}, {0, 0, 1}, 45, 25});
  const FovSweepReport r = fov_sweep(s.side(), {s.mr, s.mr}, {s.fov, inner}, RigidTransform::identity(),
                                     selfsim_describer(), s.ep, 5);
  EXPECT_EQ(r.common_voxels, count_nonzero(inner));
  EXPECT_LE(r.reproduced[0], r.reference_correct);

  FovMask left(kGrid, 0), right(kGrid, 0);
  for (int z = 0; z < 50; ++z)
    for (int y = 0; y < 50; ++y)
      for (int x = 0; x < 50; ++x) (x < 25 ? left : right)(x, y, z) = 1;
  EXPECT_THROW(fov_sweep(s.side(), {s.mr, s.mr}, {left, right}, RigidTransform::identity(), selfsim_describer(), s.ep, 6),
               Error);
  EXPECT_THROW(fov_sweep(s.side(), {s.mr}, {s.fov}, RigidTransform::identity(), selfsim_describer(), s.ep, 6), Error);
}

TEST(FovSweep, DrawsPoolCountsAndKeepFirstDraw) {
  const Scene s = scene();
  const FovMask inner = make_fov_mask(kGrid, FovSpec{{25, 25, -5}, {0, 0, 1}, 45, 25});
  const auto sweep = [&](int draws) {
    return fov_sweep(s.side(), {s.mr, s.mr}, {s.fov, inner}, RigidTransform::identity(), selfsim_describer(), s.ep, 7,
                     draws);
  };
  const FovSweepReport one = sweep(1), three = sweep(3);
  EXPECT_GE(three.reference_correct, one.reference_correct);
  EXPECT_GE(three.reproduced[0], one.reproduced[0]);
  EXPECT_LE(three.reproduced[0], three.reference_correct);
  EXPECT_EQ(three.metrics[0].n_matches, one.metrics[0].n_matches);
  EXPECT_EQ(three.metrics[1].precision, one.metrics[1].precision);
  EXPECT_THROW((void)sweep(0), Error);
}

TEST(Metrics, CsvLayout) {
  MatchMetrics m;
  m.precision = 50;
  m.matching_score = 12.5;
  m.matched_points = 2;
  m.n_matches = 4;
  m.n_mr_keypoints = 16;
  testing::TempDir dir("metrics");
  save_metrics_csv({{"trained", m}}, dir / "m.csv");
  std::ifstream in(dir / "m.csv");
  std::string h, row;
  std::getline(in, h);
  std::getline(in, row);
  EXPECT_EQ(h, "name,precision,matching_score,matched_points,n_matches,n_mr_keypoints,empty");
  EXPECT_EQ(row, "trained,50,12.5,2,4,16,0");
}

}  // namespace
}  // namespace xkey

#include <cmath>

#include "test_support.hpp"

namespace xkey {
namespace {

using testing::cube_grid;
using testing::gaussian_blob;
using testing::random_volume;

SaliencyMap map_of(const Volume& v, SaliencyTag t = SaliencyTag::us) { return {v, t}; }

HeatmapParams blob_params() {
  HeatmapParams p;
  p.detector.base_sigma = 1.0;
  return p;
}

SynthDataset dataset_of(const std::vector<Volume>& vs) {
  SynthDataset ds;
  for (const auto& v : vs) ds.items.push_back({v, 1, 1.0, 0});
  ds.fov = FovMask(vs.front().grid(), 1);
  return ds;
}

TEST(Heatmap, SingleKeypointGivesNormalizedBump) {
  const Grid g = cube_grid(33);
  const SaliencyMap h = accumulate_us_heatmap(dataset_of({gaussian_blob(g, Vec3(16, 16, 16), 2.0)}), blob_params());
  const float mx = *std::max_element(h.map.values().begin(), h.map.values().end());
  EXPECT_EQ(mx, 1.0f);
  EXPECT_EQ(h.map(16, 16, 16), 1.0f);
  // Smoothed impulse over its peak: exp(-|d|^2 / (2 sigma^2)) inside the 3-sigma cube.
  for (int d = 0; d <= 6; ++d) EXPECT_NEAR(h.map(16 + d, 16, 16), std::exp(-d * d / 8.0), 1e-6) << d;
  EXPECT_EQ(h.map(16 + 7, 16, 16), 0.0f);
}

TEST(Heatmap, NoKeypointsGivesZeros) {
  const SaliencyMap h = accumulate_us_heatmap(dataset_of({Volume(cube_grid(16), 0.3f)}), HeatmapParams{});
  for (float x : h.map.values()) ASSERT_EQ(x, 0.0f);
  const SaliencyMap m = mr_heatmap(Volume(cube_grid(16), 0.3f), HeatmapParams{});
  for (float x : m.map.values()) ASSERT_EQ(x, 0.0f);
}

TEST(Heatmap, RepeatedKeypointNormalizesAway) {
  const Volume blob = gaussian_blob(cube_grid(33), Vec3(12, 16, 18), 2.0);
  const SaliencyMap one = accumulate_us_heatmap(dataset_of({blob}), blob_params());
  const SaliencyMap two = accumulate_us_heatmap(dataset_of({blob, blob}), blob_params());
  for (std::size_t i = 0; i < one.map.size(); ++i) ASSERT_NEAR(one.map[i], two.map[i], 1e-6);
  const SaliencyMap mr = mr_heatmap(blob, blob_params());
  EXPECT_EQ(mr.tag, SaliencyTag::mr);
  for (std::size_t i = 0; i < one.map.size(); ++i) ASSERT_EQ(one.map[i], mr.map[i]);
}

TEST(Heatmap, EmptyDatasetIsError) { EXPECT_THROW((void)accumulate_us_heatmap(SynthDataset{}, HeatmapParams{}), Error); }

TEST(ProbabilisticOr, Examples) {
  const Grid g{{3, 1, 1}};
  const SaliencyMap a = map_of(Volume(g, std::vector<float>{0.0f, 1.0f, 0.5f}));
  const SaliencyMap b = map_of(Volume(g, std::vector<float>{0.0f, 0.3f, 0.5f}));
  const SaliencyMap c = probabilistic_or(a, b);
  EXPECT_EQ(c.map[0], 0.0f);
  EXPECT_EQ(c.map[1], 1.0f);
  EXPECT_EQ(c.map[2], 0.75f);
  EXPECT_THROW((void)probabilistic_or(a, map_of(Volume(cube_grid(2)))), Error);
}

TEST(ProbabilisticOr, AlgebraicLaws) {
  const Grid g = cube_grid(8);
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const SaliencyMap a = map_of(random_volume(g, seed)), b = map_of(random_volume(g, seed + 100)),
                      c = map_of(random_volume(g, seed + 200));
    const SaliencyMap zero = map_of(Volume(g, 0.0f)), one = map_of(Volume(g, 1.0f));
    const SaliencyMap ab = probabilistic_or(a, b), ba = probabilistic_or(b, a);
    const SaliencyMap l = probabilistic_or(ab, c), r = probabilistic_or(a, probabilistic_or(b, c));
    const SaliencyMap a0 = probabilistic_or(a, zero), a1 = probabilistic_or(a, one);
    for (std::size_t i = 0; i < a.map.size(); ++i) {
      ASSERT_EQ(ab.map[i], ba.map[i]);
      ASSERT_NEAR(l.map[i], r.map[i], 1e-6);
      ASSERT_EQ(a0.map[i], a.map[i]);
      ASSERT_EQ(a1.map[i], 1.0f);
      ASSERT_GE(ab.map[i], std::max(a.map[i], b.map[i]) - 1e-7f);
      ASSERT_TRUE(ab.map[i] >= 0.0f && ab.map[i] <= 1.0f);
    }
  }
}

TEST(FovPrior, CentreOneOutsideZeroAndMonotone) {
  const Grid g = cube_grid(40);
  const FovMask fov = make_fov_mask(g, FovSpec{Vec3(20, 20, 1), Vec3(0, 0, 1), 30.0, 25.0});
  const Vec3 c = fov_centroid(fov);
  const Volume w = fov_distance_weight(fov);
  // Unsmoothed weight is exactly 1 - d / max_d.
  double max_d = 0;
  for (std::size_t i = 0; i < fov.size(); ++i)
    if (fov[i]) {
      const Index3 v = g.coords(i);
      max_d = std::max(max_d, (g.world(v[0], v[1], v[2]) - c).norm());
    }
  for (std::size_t i = 0; i < fov.size(); ++i) {
    const Index3 v = g.coords(i);
    const double want = fov[i] ? 1.0 - (g.world(v[0], v[1], v[2]) - c).norm() / max_d : 0.0;
    ASSERT_NEAR(w[i], want, 1e-6);
  }
  // Along the axis from the centroid the pre-smoothing weight never increases.
  const Index3 ci = g.nearest_voxel(c);
  float prev = 2.0f;
  for (int z = ci[2]; z < 40 && fov(ci[0], ci[1], z); ++z) {
    EXPECT_LE(w(ci[0], ci[1], z), prev);
    prev = w(ci[0], ci[1], z);
  }
  const SaliencyMap m = fov_prior(fov, 4.0);
  EXPECT_EQ(*std::max_element(m.map.values().begin(), m.map.values().end()), 1.0f);
  EXPECT_EQ(m.map(0, 0, 0), 0.0f);
  EXPECT_EQ(m.map(39, 0, 2), 0.0f);
  EXPECT_THROW((void)fov_prior(FovMask(g, 0), 4.0), Error);
}

TEST(Residual, ProductBounds) {
  const Grid g = cube_grid(6);
  const SaliencyMap comb = map_of(random_volume(g, 3)), prior = map_of(random_volume(g, 4));
  const SaliencyMap r = residual_saliency(comb, prior);
  const SaliencyMap ones = residual_saliency(comb, map_of(Volume(g, 1.0f)));
  const SaliencyMap zeros = residual_saliency(comb, map_of(Volume(g, 0.0f)));
  for (std::size_t i = 0; i < r.map.size(); ++i) {
    EXPECT_EQ(ones.map[i], comb.map[i]);
    EXPECT_EQ(zeros.map[i], 0.0f);
    EXPECT_LE(r.map[i], std::min(comb.map[i], prior.map[i]));
  }
  EXPECT_THROW((void)residual_saliency(comb, map_of(Volume(cube_grid(3)))), Error);
}

TEST(Stack, UnitRangeAndVanishesWherePriorDoes) {
  PhantomSpec ps;
  ps.grid = cube_grid(32);
  const Volume mr = make_phantom(ps);
  SynthUsParams base;
  base.fov = FovSpec{Vec3(16, 16, -3), Vec3(0, 0, 1), 34.0, 30.0};
  const SynthDataset ds = build_synth_dataset(make_sequence_variants(mr, 2, 3), {0.5, 1.0}, base, 4);
  const SaliencyStack s = build_saliency(mr, ds, HeatmapParams{}, 4.0);
  for (const SaliencyMap* m : {&s.p_us, &s.p_mr, &s.p_comb, &s.m_w, &s.p_res})
    for (float x : m->map.values()) ASSERT_TRUE(x >= 0.0f && x <= 1.0f);
  std::size_t positive = 0;
  for (std::size_t i = 0; i < s.p_res.map.size(); ++i) {
    if (s.m_w.map[i] == 0.0f) {
      ASSERT_EQ(s.p_res.map[i], 0.0f);
    }
    positive += s.p_res.map[i] > 0.0f;
  }
  EXPECT_GT(positive, 0u);
}

}  // namespace
}  // namespace xkey

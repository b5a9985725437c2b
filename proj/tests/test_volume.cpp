#include <cmath>
#include <fstream>

#include "test_support.hpp"

namespace xkey {
namespace {

using testing::TempDir;
using testing::cube_grid;
using testing::random_volume;

RigidTransform random_transform(Rng& rng) {
  return random_rigid(rng, 180.0, 50.0, Vec3(uniform(rng, -5, 5), uniform(rng, -5, 5), uniform(rng, -5, 5)));
}

TEST(Rawv, TwoByTwoFileIsXFastest) {
  TempDir dir("rawv");
  const auto path = dir / "v.rawv";
  {
    std::ofstream hdr(rawv_header_path(path));
    hdr << "dims: 2 2 2\nspacing: 1 1 1\norigin: 0 0 0\ndtype: f32le\n";
    std::ofstream pay(path, std::ios::binary);
    for (int i = 0; i < 8; ++i) {
      const float f = static_cast<float>(i);
      pay.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
  const Volume v = load_volume(path);
  EXPECT_EQ(v(1, 0, 0), 1.0f);
  EXPECT_EQ(v(0, 1, 0), 2.0f);
  EXPECT_EQ(v(0, 0, 1), 4.0f);
}

TEST(Rawv, PayloadSizeMismatchIsFormatError) {
  TempDir dir("rawv");
  const auto path = dir / "v.rawv";
  {
    std::ofstream hdr(rawv_header_path(path));
    hdr << "dims: 4 4 4\nspacing: 1 1 1\norigin: 0 0 0\ndtype: f32le\n";
    std::ofstream pay(path, std::ios::binary);
    const float f = 0.0f;
    for (int i = 0; i < 63; ++i) pay.write(reinterpret_cast<const char*>(&f), 4);
  }
  try {
    (void)load_volume(path);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
}

TEST(Rawv, MissingFileAndNonFiniteRejected) {
  TempDir dir("rawv");
  EXPECT_THROW((void)load_volume(dir / "absent.rawv"), Error);
  const auto path = dir / "nan.rawv";
  {
    std::ofstream hdr(rawv_header_path(path));
    hdr << "dims: 2 1 1\nspacing: 1 1 1\norigin: 0 0 0\ndtype: f32le\n";
    std::ofstream pay(path, std::ios::binary);
    const float f[2] = {1.0f, std::nanf("")};
    pay.write(reinterpret_cast<const char*>(f), 8);
  }
  EXPECT_THROW((void)load_volume(path), Error);
}

TEST(Rawv, RoundTripIsBitExactAndOverwrites) {
  TempDir dir("rawv");
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Grid g{{3 + int(seed), 4, 5}, {0.5, 1.25, 2.0}, {-3.0, 7.5, 0.125}};
    Volume v = random_volume(g, seed, -1e6, 1e6);
    v[0] = -0.0f;
    v[1] = std::numeric_limits<float>::denorm_min();
    const auto path = dir / "rt.rawv";
    save_volume(v, path);
    const Volume r = load_volume(path);
    ASSERT_TRUE(r.grid().congruent(g, 0.0));
    for (std::size_t i = 0; i < v.size(); ++i)
      ASSERT_EQ(std::bit_cast<std::uint32_t>(v[i]), std::bit_cast<std::uint32_t>(r[i]));
  }
}

TEST(Rawv, UnwritableDirectoryIsIoError) {
  Volume v(cube_grid(2), 1.0f);
  try {
    save_volume(v, "/nonexistent_dir_xkey/a/b.rawv");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Normalize, AffineConstantAndFixedPoint) {
  Volume v(Grid{{3, 1, 1}}, std::vector<float>{2, 3, 4});
  const Volume n = normalize_intensity(v);
  EXPECT_EQ(n[0], 0.0f);
  EXPECT_EQ(n[1], 0.5f);
  EXPECT_EQ(n[2], 1.0f);
  const Volume c = normalize_intensity(Volume(cube_grid(3), 7.0f));
  for (float x : c.values()) EXPECT_EQ(x, 0.0f);
  Volume u(Grid{{4, 1, 1}}, std::vector<float>{0.0f, 0.25f, 1.0f, 0.75f});
  EXPECT_EQ(normalize_intensity(u), u);
}

TEST(Smooth, ConstantAndZeroSigma) {
  const Volume c(cube_grid(7), 3.5f);
  const Volume s = gaussian_smooth(c, 1.7);
  for (float x : s.values()) EXPECT_NEAR(x, 3.5f, 1e-6);
  const Volume r = random_volume(cube_grid(6), 3);
  EXPECT_EQ(gaussian_smooth(r, 0.0), r);
  EXPECT_THROW((void)gaussian_smooth(r, -1.0), Error);
}

TEST(Smooth, ImpulseMatchesDenseGaussian) {
  Volume v(cube_grid(9), 0.0f);
  v(4, 4, 4) = 1.0f;
  const Volume s = gaussian_smooth(v, 1.0);
  // Dense 3-D kernel truncated to the 7^3 cube, normalized over that cube.
  double z = 0.0;
  for (int a = -3; a <= 3; ++a)
    for (int b = -3; b <= 3; ++b)
      for (int c = -3; c <= 3; ++c) z += std::exp(-0.5 * (a * a + b * b + c * c));
  for (int x = 0; x < 9; ++x)
    for (int y = 0; y < 9; ++y)
      for (int k = 0; k < 9; ++k) {
        const int dx = x - 4, dy = y - 4, dz = k - 4;
        const bool inside = std::abs(dx) <= 3 && std::abs(dy) <= 3 && std::abs(dz) <= 3;
        const double want = inside ? std::exp(-0.5 * (dx * dx + dy * dy + dz * dz)) / z : 0.0;
        ASSERT_NEAR(s(x, y, k), want, 1e-6) << x << ' ' << y << ' ' << k;
      }
}

TEST(Smooth, PreservesGlobalMean) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    Rng rng(seed);
    const Grid g{{5 + int(seed % 4), 7, 6 + int(seed % 3)}};
    const Volume v = random_volume(g, seed);
    const Volume s = gaussian_smooth(v, uniform(rng, 0.5, 1.8));
    double a = 0, b = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      a += v[i];
      b += s[i];
    }
    EXPECT_NEAR(b / a, 1.0, 1e-4);
  }
}

TEST(Trilinear, CentresMidpointsAndFill) {
  Volume v(Grid{{2, 1, 1}}, std::vector<float>{0.0f, 1.0f});
  EXPECT_EQ(trilinear_sample(v, Vec3(1, 0, 0)), 1.0);
  EXPECT_EQ(trilinear_sample(v, Vec3(0.5, 0, 0)), 0.5);
  EXPECT_EQ(trilinear_sample(v, Vec3(3, 0, 0), OutOfBounds::fill_zero), 0.0);
  EXPECT_THROW((void)trilinear_sample(v, Vec3(3, 0, 0)), Error);
  const Volume r = random_volume(cube_grid(5, 2.0, Vec3(1, 2, 3)), 9);
  for (int i = 0; i < 20; ++i) {
    const Index3 c = r.grid().coords(static_cast<std::size_t>(i * 6));
    EXPECT_EQ(trilinear_sample(r, r.grid().world(c[0], c[1], c[2])), r(c[0], c[1], c[2]));
  }
}

TEST(Trilinear, IsLinearInValues) {
  const Grid g = cube_grid(6, 1.5);
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const Volume v1 = random_volume(g, 100 + trial), v2 = random_volume(g, 200 + trial);
    const double a = uniform(rng, -2, 2), b = uniform(rng, -2, 2);
    Volume mix(g);
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = static_cast<float>(a * v1[i] + b * v2[i]);
    const Vec3 p(uniform(rng, 0, 7.5), uniform(rng, 0, 7.5), uniform(rng, 0, 7.5));
    EXPECT_NEAR(trilinear_sample(mix, p), a * trilinear_sample(v1, p) + b * trilinear_sample(v2, p), 1e-6);
  }
}

TEST(Resample, IdentityAndUnitShift) {
  const Volume v = random_volume(cube_grid(8), 4);
  EXPECT_EQ(resample_rigid(v, RigidTransform::identity(), v.grid()), v);
  const Volume s = resample_rigid(v, RigidTransform::translation(Vec3(1, 0, 0)), v.grid());
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y) {
      EXPECT_EQ(s(0, y, z), 0.0f);
      for (int x = 1; x < 8; ++x) ASSERT_NEAR(s(x, y, z), v(x - 1, y, z), 1e-6);
    }
}

TEST(Resample, RoundTripWithinGradientTolerance) {
  const Grid g = cube_grid(24);
  const Volume v = gaussian_smooth(random_volume(g, 8), 2.0);
  const Volume grad = gradient_magnitude(v);
  const double gmax = *std::max_element(grad.values().begin(), grad.values().end());
  Rng rng(21);
  const RigidTransform t = random_rigid(rng, 15.0, 3.0, Vec3::Constant(11.5));
  const Volume back = resample_rigid(resample_rigid(v, t, g), invert(t), g);
  for (int z = 6; z < 18; ++z)
    for (int y = 6; y < 18; ++y)
      for (int x = 6; x < 18; ++x) ASSERT_NEAR(back(x, y, z), v(x, y, z), 2.0 * gmax * 1.0);
}

TEST(Rigid, ComposeInvertIdentities) {
  Rng rng(5);
  const RigidTransform id = RigidTransform::identity();
  EXPECT_TRUE(invert(id).is_identity());
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t = random_transform(rng);
    const RigidTransform a = compose(t, id);
    EXPECT_EQ(a.rotation(), t.rotation());
    EXPECT_EQ(a.translation(), t.translation());
    const RigidTransform e = compose(invert(t), t);
    EXPECT_LT((e.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT(e.translation().cwiseAbs().maxCoeff(), 1e-9);
    const RigidTransform ii = invert(invert(t));
    EXPECT_LT((ii.rotation() - t.rotation()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((ii.translation() - t.translation()).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Rigid, CompositionDriftStaysBounded) {
  Rng rng(6);
  RigidTransform acc;
  for (int i = 0; i < 1000; ++i) acc = compose(random_transform(rng), acc);
  const Mat3& r = acc.rotation();
  EXPECT_LT((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-6);
}

TEST(Rigid, RejectsNonRotation) {
  Mat3 m = Mat3::Identity();
  m(0, 0) = -1.0;
  EXPECT_THROW(RigidTransform(m, Vec3::Zero()), Error);
  EXPECT_THROW(RigidTransform(2.0 * Mat3::Identity(), Vec3::Zero()), Error);
}

TEST(Rigid, TextRoundTrip) {
  TempDir dir("rt");
  Rng rng(8);
  const RigidTransform t = random_transform(rng);
  save_transform(t, dir / "t.rt");
  const RigidTransform r = load_transform(dir / "t.rt");
  EXPECT_EQ(r.rotation(), t.rotation());
  EXPECT_EQ(r.translation(), t.translation());
}

}  // namespace
}  // namespace xkey

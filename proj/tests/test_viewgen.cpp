#include <gtest/gtest.h>

#include <numeric>

#include <cmath>

#include "oracles.hpp"

using namespace pixpro;

namespace {

CropRecord rec(int x0, int y0, int w, int h, int out_res = 4, bool flip = false) { return {x0, y0, w, h, out_res, flip}; }

Tensor<float> ramp_image(std::size_t H, std::size_t W) {
  Tensor<float> img({3, H, W});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) img[(c * H + y) * W + x] = static_cast<float>((x + 2 * y + c) % 17) / 16.0f;
  return img;
}

}  // namespace

TEST(WarpGrid, CentresOfSixteenPixelCrop) {
  const auto g = warp_grid(rec(0, 0, 16, 16), 4);
  const double expect[] = {2, 6, 10, 14};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      EXPECT_DOUBLE_EQ(g.at(std::size_t(r * 4 + c), 0), expect[c]);
      EXPECT_DOUBLE_EQ(g.at(std::size_t(r * 4 + c), 1), expect[r]);
    }
}

TEST(WarpGrid, FlipMirrorsX) {
  const auto a = warp_grid(rec(3, 1, 12, 9), 3), b = warp_grid(rec(3, 1, 12, 9, 4, true), 3);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(b.at(std::size_t(r * 3 + c), 0), a.at(std::size_t(r * 3 + 2 - c), 0));
      EXPECT_DOUBLE_EQ(b.at(std::size_t(r * 3 + c), 1), a.at(std::size_t(r * 3 + c), 1));
    }
}

TEST(WarpGrid, SingleCellIsCropMidpoint) {
  const auto g = warp_grid(rec(2, 4, 10, 6), 1);
  EXPECT_DOUBLE_EQ(g.at(0, 0), 7.0);
  EXPECT_DOUBLE_EQ(g.at(0, 1), 7.0);
}

TEST(WarpGrid, MatchesOracleCentres) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    auto r = rec(int(rng.uniform_int(0, 10)), int(rng.uniform_int(0, 10)), int(rng.uniform_int(1, 20)),
                 int(rng.uniform_int(1, 20)), 8, rng.bernoulli(0.5));
    const int f = int(rng.uniform_int(1, 8));
    const auto g = warp_grid(r, f);
    for (int i = 0; i < f * f; ++i) {
      const auto [x, y] = oracle::cell_centre(r, f, i / f, i % f);
      EXPECT_NEAR(g.at(std::size_t(i), 0), x, 1e-12);
      EXPECT_NEAR(g.at(std::size_t(i), 1), y, 1e-12);
    }
  }
}

TEST(DistanceMatrix, HalfOverlappingCrops) {
  const auto a = rec(0, 0, 16, 16), b = rec(8, 8, 16, 16);
  const auto d = distance_matrix(warp_grid(a, 4), warp_grid(b, 4), a, b, 4);
  EXPECT_DOUBLE_EQ(d.bin_diag_a, 4 * std::sqrt(2.0));
  // A's cell (3,3) is at (14,14); B's cell (1,1) is at (14,14) and B's (0,0) at (10,10).
  EXPECT_DOUBLE_EQ(d.values.at(15, 5), 0.0);
  EXPECT_NEAR(d.values.at(15, 0), 1.0, 1e-12);
}

TEST(DistanceMatrix, CoincidentCentresAreZero) {
  const auto a = rec(5, 5, 8, 8);
  const auto d = distance_matrix(warp_grid(a, 2), warp_grid(a, 2), a, a, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(d.values.at(i, i), 0.0);
}

TEST(DistanceMatrix, UniformRescaleInvariant) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    auto a = rec(int(rng.uniform_int(0, 8)), int(rng.uniform_int(0, 8)), int(rng.uniform_int(2, 16)),
                 int(rng.uniform_int(2, 16)), 8, rng.bernoulli(0.5));
    auto b = rec(int(rng.uniform_int(0, 8)), int(rng.uniform_int(0, 8)), int(rng.uniform_int(2, 16)),
                 int(rng.uniform_int(2, 16)), 8, rng.bernoulli(0.5));
    auto a2 = rec(2 * a.x0, 2 * a.y0, 2 * a.w, 2 * a.h, 8, a.flip), b2 = rec(2 * b.x0, 2 * b.y0, 2 * b.w, 2 * b.h, 8, b.flip);
    const int f = int(rng.uniform_int(1, 6));
    const auto d1 = distance_matrix(warp_grid(a, f), warp_grid(b, f), a, b, f);
    const auto d2 = distance_matrix(warp_grid(a2, f), warp_grid(b2, f), a2, b2, f);
    EXPECT_LT(max_abs_diff(d1.values, d2.values), 1e-12);
  }
}

TEST(DistanceMatrix, DiagonalRules) {
  const auto a = rec(0, 0, 16, 16), b = rec(0, 0, 8, 8);
  const auto ga = warp_grid(a, 2), gb = warp_grid(b, 2);
  const double da = 8 * std::sqrt(2.0), db = 4 * std::sqrt(2.0);
  const double raw = std::hypot(4.0 - 2.0, 4.0 - 2.0);
  EXPECT_NEAR(distance_matrix(ga, gb, a, b, 2, DiagonalRule::max).values.at(0, 0), raw / da, 1e-12);
  EXPECT_NEAR(distance_matrix(ga, gb, a, b, 2, DiagonalRule::mean).values.at(0, 0), raw / (0.5 * (da + db)), 1e-12);
  EXPECT_NEAR(distance_matrix(ga, gb, a, b, 2, DiagonalRule::per_view).values.at(0, 0), raw / da, 1e-12);
  EXPECT_NEAR(distance_matrix(gb, ga, b, a, 2, DiagonalRule::per_view).values.at(0, 0), raw / db, 1e-12);
}

TEST(Assign, BoundaryIsPositive) {
  DistanceMatrix d;
  d.values = Tensor<double>({1, 3}, std::vector<double>{0.0, 0.7, 0.7000001});
  const auto a = assign(d, 0.7);
  EXPECT_EQ(a.positives(0, 0), 1);
  EXPECT_EQ(a.positives(0, 1), 1);
  EXPECT_EQ(a.positives(0, 2), 0);
  EXPECT_THROW(assign(d, 0.0), Error);
}

TEST(Assign, MatchesBruteForceAndSymmetries) {
  Rng rng(12);
  AugmentConfig aug;
  for (int t = 0; t < 200; ++t) {
    const int W = int(rng.uniform_int(8, 48)), H = int(rng.uniform_int(8, 48)), f = int(rng.uniform_int(1, 8));
    auto a = sample_crop(W, H, aug, rng), b = sample_crop(W, H, aug, rng);
    a.flip = rng.bernoulli(0.5);
    b.flip = rng.bernoulli(0.5);
    const auto ab = assign_views(a, b, f, 0.7), ba = assign_views(b, a, f, 0.7);
    EXPECT_EQ(oracle::bits_of(ab.positives), oracle::brute_assign(a, b, f, 0.7));
    EXPECT_EQ(ab.positives, ba.transposed().positives);
  }
}

TEST(Assign, IdenticalCropsPairDiagonal) {
  const auto a = rec(3, 2, 13, 11, 8, true);
  const auto m = assign_views(a, a, 4, 0.7);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(m.positives(i, i), 1);
}

TEST(Overlap, Conventions) {
  EXPECT_TRUE(overlap_check(rec(0, 0, 8, 8), rec(0, 0, 8, 8)));
  EXPECT_FALSE(overlap_check(rec(0, 0, 8, 8), rec(16, 16, 8, 8)));
  EXPECT_FALSE(overlap_check(rec(0, 0, 8, 8), rec(8, 0, 8, 8)));
  EXPECT_TRUE(overlap_check(rec(0, 0, 8, 8), rec(7, 7, 8, 8)));
}

TEST(AssignmentFile, RoundTrip) {
  oracle::TempDir dir("asn");
  const auto m = assign_views(rec(0, 0, 16, 16), rec(8, 8, 16, 16), 4, 0.7);
  write_assignment(dir.path() / "a.bin", m);
  EXPECT_EQ(read_assignment(dir.path() / "a.bin"), m.positives);
  { std::ofstream(dir.path() / "bad.bin") << "garbage!"; }
  EXPECT_THROW(read_assignment(dir.path() / "bad.bin"), Error);
}

TEST(SampleCrop, RecordsAreValid) {
  Rng rng(21);
  AugmentConfig aug;
  for (int t = 0; t < 2000; ++t) {
    const int W = int(rng.uniform_int(8, 64)), H = int(rng.uniform_int(8, 64));
    const auto r = sample_crop(W, H, aug, rng);
    ASSERT_GE(r.x0, 0);
    ASSERT_GE(r.y0, 0);
    ASSERT_GE(r.w, 1);
    ASSERT_GE(r.h, 1);
    ASSERT_LE(r.x0 + r.w, W);
    ASSERT_LE(r.y0 + r.h, H);
  }
}

std::vector<int> area_histogram(AugmentConfig aug, int bins, std::uint64_t seed) {
  Rng rng(seed);
  const int W = 256, H = 256;
  std::vector<int> hist(std::size_t(bins), 0);
  for (int t = 0; t < 10000; ++t) {
    const auto r = sample_crop(W, H, aug, rng);
    const double frac = double(r.w) * r.h / (W * H);
    EXPECT_GE(frac, aug.scale_min);
    EXPECT_LE(frac, aug.scale_max);
    ++hist[std::size_t(std::min(bins - 1, int((frac - aug.scale_min) / (aug.scale_max - aug.scale_min) * bins)))];
  }
  return hist;
}

TEST(SampleCrop, AreaFractionUniformOverRange) {
  AugmentConfig aug;
  aug.scale_min = 0.08;
  aug.ratio_min = aug.ratio_max = 1.0;
  for (int c : area_histogram(aug, 10, 22)) EXPECT_NEAR(c, 1000, 250);
}

TEST(SampleCrop, AreaFractionUniformWhereEveryRatioFits) {
  // Above area 3/4 a 4:3 crop no longer fits a square image, so rejection thins the top bins.
  AugmentConfig aug;
  aug.scale_min = 0.08;
  const auto hist = area_histogram(aug, 10, 23);
  const double mean = std::accumulate(hist.begin(), hist.begin() + 7, 0.0) / 7;
  for (int b = 0; b < 7; ++b) EXPECT_NEAR(hist[std::size_t(b)], mean, 0.15 * mean);
  EXPECT_LT(hist[9], mean);
}

TEST(SampleCrop, RejectsTinyImage) {
  Rng rng(1);
  EXPECT_THROW(sample_crop(4, 32, AugmentConfig{}, rng), Error);
}

TEST(ViewPair, FullCropIsBilinearResize) {
  const auto img = ramp_image(16, 16);
  const auto v = render_view(img, rec(0, 0, 16, 16, 8));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        // Output pixel centres fall midway between source pixels 2x and 2x+1.
        const double ref = 0.25 * (img[(c * 16 + 2 * y) * 16 + 2 * x] + img[(c * 16 + 2 * y) * 16 + 2 * x + 1] +
                                   img[(c * 16 + 2 * y + 1) * 16 + 2 * x] + img[(c * 16 + 2 * y + 1) * 16 + 2 * x + 1]);
        EXPECT_NEAR(v[(c * 8 + y) * 8 + x], ref, 1e-6);
      }
}

TEST(ViewPair, ForcedFullCropNoFlip) {
  AugmentConfig aug;
  aug.out_res = 16;
  aug.scale_min = aug.scale_max = 1.0;
  aug.ratio_min = aug.ratio_max = 1.0;
  aug.flip_p = 0.0;
  const auto img = ramp_image(16, 16);
  Rng rng(3);
  const auto [a, b] = sample_view_pair(img, aug, rng);
  EXPECT_EQ(a.rec, rec(0, 0, 16, 16, 16, false));
  EXPECT_EQ(b.rec, a.rec);
  EXPECT_EQ(a.pixels, img);
}

TEST(ViewPair, SameSeedIsBitIdentical) {
  const auto img = ramp_image(24, 20);
  AugmentConfig aug;
  aug.out_res = 8;
  Rng r1({5, 6}), r2({5, 6});
  const auto p1 = sample_view_pair(img, aug, r1), p2 = sample_view_pair(img, aug, r2);
  EXPECT_EQ(p1.first.rec, p2.first.rec);
  EXPECT_EQ(p1.second.rec, p2.second.rec);
  EXPECT_EQ(p1.first.pixels, p2.first.pixels);
  EXPECT_EQ(p1.second.pixels, p2.second.pixels);
}

TEST(ViewPair, FlippedViewIsMirror) {
  const auto img = ramp_image(16, 16);
  const auto a = render_view(img, rec(2, 3, 10, 9, 6)), b = render_view(img, rec(2, 3, 10, 9, 6, true));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(a[(c * 6 + y) * 6 + x], b[(c * 6 + y) * 6 + 5 - x]);
}

TEST(Photometric, AllOffIsIdentity) {
  const auto img = ramp_image(8, 8);
  Rng rng(1);
  EXPECT_EQ(apply_photometric(img, rng, PhotometricConfig::disabled()), img);
}

TEST(Photometric, SolarizeDefinition) {
  Tensor<float> v({1, 1, 4}, std::vector<float>{0.1f, 0.49f, 0.5f, 0.9f});
  solarize(v, 0.5);
  EXPECT_FLOAT_EQ(v[0], 0.1f);
  EXPECT_FLOAT_EQ(v[1], 0.49f);
  EXPECT_FLOAT_EQ(v[2], 0.5f);
  EXPECT_FLOAT_EQ(v[3], 0.1f);
}

TEST(Photometric, BlurFixesConstants) {
  Tensor<float> v({3, 8, 8}, 0.42f);
  gaussian_blur(v, 50.0);
  for (float x : v.data()) EXPECT_NEAR(x, 0.42f, 1e-6);
}

TEST(Photometric, OutputStaysInUnitRange) {
  const auto img = ramp_image(12, 12);
  PhotometricConfig cfg;
  cfg.solarize_p = 0.5;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    const auto out = apply_photometric(img, rng, cfg);
    ASSERT_EQ(out.shape(), img.shape());
    for (float x : out.data()) {
      ASSERT_GE(x, 0.0f);
      ASSERT_LE(x, 1.0f);
    }
  }
}

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace pixpro;

namespace {

using V = Var<double>;

V mat(std::size_t r, std::size_t c, std::vector<double> v) { return V::leaf(Tensor<double>({r, c}, std::move(v))); }

Tensor<double> randn(Rng& rng, Shape s) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

AssignmentMatrix mask_of(std::vector<std::vector<int>> bits) {
  AssignmentMatrix a{Mask(bits.size(), bits[0].size()), 0.7};
  for (std::size_t i = 0; i < bits.size(); ++i)
    for (std::size_t j = 0; j < bits[i].size(); ++j) a.positives(i, j) = std::uint8_t(bits[i][j]);
  return a;
}

AssignmentMatrix random_mask(Rng& rng, std::size_t n, std::size_t m) {
  for (;;) {
    AssignmentMatrix a{Mask(n, m), 0.7};
    for (auto& b : a.positives.bits) b = rng.bernoulli(0.35);
    if (a.positives.count() > 0) return a;
  }
}

}  // namespace

TEST(PixContrast, OnePositiveOneNegativeEqualCosines) {
  // Every online cell is at cosine 0 from both target cells; each row has one positive.
  const auto x = mat(2, 3, {1, 0, 0, 1, 0, 0}), t = mat(2, 3, {0, 1, 0, 0, 0, 1});
  const auto l = pix_contrast_loss<double>({{x, x, t, t, mask_of({{1, 0}, {0, 1}})}}, 0.3);
  ASSERT_TRUE(l.has_value());
  EXPECT_NEAR(l->value.value().item(), std::log(2.0), 1e-12);
  EXPECT_EQ(l->pairs, 2u);
}

TEST(PixContrast, AllPositiveIsZero) {
  Rng rng(1);
  CellPair<double> p{V::leaf(randn(rng, {3, 4})), V::leaf(randn(rng, {3, 4})), V::leaf(randn(rng, {3, 4})),
                     V::leaf(randn(rng, {3, 4})), mask_of({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}})};
  EXPECT_NEAR(pix_contrast_loss<double>({p}, 0.3)->value.value().item(), 0.0, 1e-12);
}

TEST(PixContrast, MatchesScalarOracle) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t images = std::size_t(rng.uniform_int(1, 3));
    std::vector<CellPair<double>> ps;
    double ref = 0;
    for (std::size_t n = 0; n < images; ++n) {
      const auto a = randn(rng, {3, 5}), b = randn(rng, {3, 5}), ta = randn(rng, {3, 5}), tb = randn(rng, {3, 5});
      const auto m = random_mask(rng, 3, 3);
      ps.push_back({V::leaf(a), V::leaf(b), V::leaf(ta), V::leaf(tb), m});
      const auto bits = oracle::bits_of(m.positives), bt = oracle::bits_of(m.positives.transposed());
      ref += 0.5 * (oracle::pix_contrast_direction(oracle::rows_of(a), oracle::rows_of(tb), bits, 0.4) +
                    oracle::pix_contrast_direction(oracle::rows_of(b), oracle::rows_of(ta), bt, 0.4));
    }
    const auto l = pix_contrast_loss(ps, 0.4);
    ASSERT_TRUE(l);
    EXPECT_NEAR(l->value.value().item(), ref / double(images), 1e-9);
    EXPECT_GE(l->value.value().item(), 0.0);
  }
}

TEST(PixContrast, EmptyCellDropsOut) {
  Rng rng(3);
  const auto a = randn(rng, {3, 4}), tb = randn(rng, {3, 4});
  auto full = mask_of({{1, 0, 0}, {0, 0, 0}, {0, 1, 1}});
  // Same loss with the empty row 1 removed from A.
  Tensor<double> a2({2, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    a2[c] = a[c];
    a2[4 + c] = a[8 + c];
  }
  const auto l1 = positive_set_nll(cosine_similarity_matrix(V::leaf(a), V::leaf(tb)), full.positives);
  const auto l2 = positive_set_nll(cosine_similarity_matrix(V::leaf(a2), V::leaf(tb)), mask_of({{1, 0, 0}, {0, 1, 1}}).positives);
  EXPECT_NEAR(l1.value().item(), l2.value().item(), 1e-12);
}

TEST(PixContrast, SkipSignal) {
  Rng rng(4);
  CellPair<double> p{V::leaf(randn(rng, {2, 3})), V::leaf(randn(rng, {2, 3})), V::leaf(randn(rng, {2, 3})),
                     V::leaf(randn(rng, {2, 3})), AssignmentMatrix{Mask(2, 2), 0.7}};
  EXPECT_FALSE(pix_contrast_loss<double>({p}, 0.3).has_value());
  EXPECT_FALSE(pixpro_loss<double>({p}).has_value());
  EXPECT_THROW(pix_contrast_loss<double>({p}, 0.0), Error);
}

TEST(PixPro, AlignedPairsGiveMinusTwo) {
  Rng rng(5);
  const auto ta = randn(rng, {2, 4}), tb = randn(rng, {2, 4});
  // y_a[i] = 2.5 x'_b[j] for positive (i,j), and the same the other way.
  auto ya = tb, yb = ta;
  for (auto& v : ya.data()) v *= 2.5;
  for (auto& v : yb.data()) v *= 0.5;
  CellPair<double> p{V::leaf(ya), V::leaf(yb), V::leaf(ta), V::leaf(tb), mask_of({{1, 0}, {0, 1}})};
  EXPECT_NEAR(pixpro_loss<double>({p})->value.value().item(), -2.0, 1e-12);
}

TEST(PixPro, OrthogonalIsZero) {
  const auto e = [](int k) {
    std::vector<double> v(4, 0.0);
    v[std::size_t(k)] = 1;
    return V::leaf(Tensor<double>({1, 4}, v));
  };
  CellPair<double> p{e(0), e(1), e(2), e(3), mask_of({{1}})};
  EXPECT_NEAR(pixpro_loss<double>({p})->value.value().item(), 0.0, 1e-15);
}

TEST(PixPro, MatchesOracleAndIsBounded) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const std::size_t images = std::size_t(rng.uniform_int(1, 3)), n = std::size_t(rng.uniform_int(2, 8));
    std::vector<CellPair<double>> ps;
    double ref = 0;
    for (std::size_t k = 0; k < images; ++k) {
      const auto a = randn(rng, {n, 4}), b = randn(rng, {n, 4}), ta = randn(rng, {n, 4}), tb = randn(rng, {n, 4});
      const auto m = random_mask(rng, n, n);
      ps.push_back({V::leaf(a), V::leaf(b), V::leaf(ta), V::leaf(tb), m});
      ref += oracle::pixpro_image(oracle::rows_of(a), oracle::rows_of(b), oracle::rows_of(ta), oracle::rows_of(tb),
                                  oracle::bits_of(m.positives));
    }
    const double v = pixpro_loss(ps)->value.value().item();
    EXPECT_NEAR(v, ref / double(images), 1e-9);
    EXPECT_GE(v, -2.0);
    EXPECT_LE(v, 2.0);
  }
}

TEST(PixPro, InvariantToCellOrderAndScale) {
  Rng rng(7);
  const std::size_t n = 4;
  const auto a = randn(rng, {n, 3}), b = randn(rng, {n, 3}), ta = randn(rng, {n, 3}), tb = randn(rng, {n, 3});
  const auto m = random_mask(rng, n, n);
  const double base = pixpro_loss<double>({{V::leaf(a), V::leaf(b), V::leaf(ta), V::leaf(tb), m}})->value.value().item();
  // Reverse the cells of view A in both features and assignment rows; scale one online cell.
  Tensor<double> ra = a, rta = ta;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      ra[i * 3 + c] = a[(n - 1 - i) * 3 + c] * (i == 0 ? 7.0 : 1.0);
      rta[i * 3 + c] = ta[(n - 1 - i) * 3 + c];
    }
  AssignmentMatrix rm{Mask(n, n), 0.7};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) rm.positives(i, j) = m.positives(n - 1 - i, j);
  const double perm = pixpro_loss<double>({{V::leaf(ra), V::leaf(b), V::leaf(rta), V::leaf(tb), rm}})->value.value().item();
  EXPECT_NEAR(base, perm, 1e-12);
}

TEST(PixPro, TargetInputsGetNoGradient) {
  Rng rng(8);
  auto a = V::leaf(randn(rng, {3, 4}), true), b = V::leaf(randn(rng, {3, 4}), true);
  auto ta = V::leaf(randn(rng, {3, 4})), tb = V::leaf(randn(rng, {3, 4}));
  backward(pixpro_loss<double>({{a, b, ta, tb, random_mask(rng, 3, 3)}})->value);
  EXPECT_FALSE(ta.has_grad());
  EXPECT_FALSE(tb.has_grad());
  EXPECT_TRUE(a.has_grad());
}

TEST(Instance, TwoLogitCase) {
  // Positive cosine 1, negative cosine 0, tau 1.
  const auto z = mat(2, 2, {1, 0, 0, 1});
  const auto v = instance_loss(z, z, 1.0).value().item();
  EXPECT_NEAR(v, -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
  EXPECT_NEAR(v, 0.3133, 1e-4);
}

TEST(Instance, IdenticalEmbeddingsGiveLogBatch) {
  for (std::size_t n : {2u, 5u}) {
    const auto z = V::leaf(Tensor<double>({n, 3}, 1.0));
    EXPECT_NEAR(instance_loss(z, z, 0.3).value().item(), std::log(double(n)), 1e-12);
  }
}

TEST(Instance, MatchesInfoNceOracle) {
  Rng rng(9);
  const auto za = randn(rng, {4, 6}), tb = randn(rng, {4, 6}), zb = randn(rng, {4, 6}), ta = randn(rng, {4, 6});
  const double ref = 0.5 * (oracle::info_nce(oracle::rows_of(za), oracle::rows_of(tb), 0.3) +
                            oracle::info_nce(oracle::rows_of(zb), oracle::rows_of(ta), 0.3));
  EXPECT_NEAR(instance_loss(V::leaf(za), V::leaf(tb), V::leaf(zb), V::leaf(ta), 0.3).value().item(), ref, 1e-9);
}

TEST(Instance, BatchOfOneRejected) {
  const auto z = mat(1, 2, {1, 0});
  EXPECT_THROW(instance_loss(z, z, 0.3), Error);
}

TEST(Combined, Arithmetic) {
  EXPECT_EQ(combined_loss(-1.5, 0.3, 0.0).total, -1.5);
  EXPECT_NEAR(combined_loss(-1.5, 0.3, 1.0).total, -1.2, 1e-15);
  EXPECT_THROW(combined_loss(0.0, 0.0, -1.0), Error);
}

TEST(Combined, GradientIsLinear) {
  Rng rng(10);
  auto w = V::leaf(randn(rng, {3, 4}), true);
  const auto t = V::leaf(randn(rng, {3, 4}));
  auto pix = [&] { return pixpro_loss<double>({{w, w, t, t, mask_of({{1, 0, 0}, {0, 1, 1}, {0, 0, 1}})}})->value; };
  auto inst = [&] { return instance_loss(w, t, 0.5); };
  const auto gp = grad_eval(pix(), {w})[0], gi = grad_eval(inst(), {w})[0];
  const auto gc = grad_eval(combined_loss(pix(), inst(), 0.7), {w})[0];
  for (std::size_t i = 0; i < gc.numel(); ++i) EXPECT_NEAR(gc[i], gp[i] + 0.7 * gi[i], 1e-12);
}

TEST(Multiscale, MeanOverLevelsSkippingEmpty) {
  auto term = [](double v) { return std::optional<LossTerm<double>>(LossTerm<double>{V::leaf(Tensor<double>::scalar(v)), 1}); };
  EXPECT_EQ(multiscale_loss<double>({term(-1.2)})->value.value().item(), -1.2);
  EXPECT_NEAR(multiscale_loss<double>({term(-1.0), term(-0.5)})->value.value().item(), -0.75, 1e-15);
  EXPECT_NEAR(multiscale_loss<double>({term(-0.4), std::nullopt, term(-0.4)})->value.value().item(), -0.4, 1e-15);
  EXPECT_FALSE(multiscale_loss<double>({std::nullopt, std::nullopt}).has_value());
}

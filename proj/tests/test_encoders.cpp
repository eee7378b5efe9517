#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace camchex;
using testutil::fd_error;

namespace {

// Small enough for an exhaustive finite-difference sweep.
ArchConfig tiny_arch() {
  ArchConfig a;
  a.resolution = 16;
  a.stage_channels = {4, 8};
  a.reduction = 2;
  a.text_dim = 8;
  a.text_layers = 1;
  a.text_heads = 2;
  a.max_tokens = 6;
  a.vocab_size = 10;
  a.fusion_layers = 1;
  a.fusion_heads = 2;
  a.head_heads = 2;
  a.num_classes = 3;
  return a;
}

template <class M>
std::vector<Tensor<double>> params_of(M& m) {
  std::vector<Tensor<double>> out;
  m.visit([&](const std::string&, Tensor<double>& t) { out.push_back(t); }, "");
  return out;
}

Tensor<double> image_batch(std::size_t m, std::size_t res, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(m * res * res);
  for (auto& x : v) x = u(rng);
  return Tensor<double>({m, 1, res, res}, std::move(v));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST(ImageEncoder, DeskShapes) {
  Rng init(1);
  std::mt19937_64 rng(2);
  const auto arch = ArchConfig::desk();
  const auto enc = ImageEncoder<double>::init(arch, init);
  const auto z = encode_view(enc, image_batch(3, 64, rng));
  EXPECT_EQ(z.shape(), (Shape{3, 32, 8, 8}));
  EXPECT_EQ(encode_view(enc, Tensor<double>({0, 1, 64, 64})).shape(), (Shape{0, 32, 8, 8}));
  EXPECT_THROW(encode_view(enc, Tensor<double>({1, 1, 32, 32})), InputError);
  for (double v : z.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ImageEncoder, RowsAreIndependent) {
  Rng init(3);
  std::mt19937_64 rng(4);
  const auto enc = ImageEncoder<double>::init(ArchConfig::desk(), init);
  const auto one = image_batch(1, 64, rng), other = image_batch(1, 64, rng);
  const auto z = encode_view(enc, ops::concat_rows<double>({one, other, one}));
  const std::size_t row = 32 * 8 * 8;
  for (std::size_t i = 0; i < row; ++i) EXPECT_EQ(z.data()[i], z.data()[2 * row + i]);
  const auto alone = encode_view(enc, other);
  for (std::size_t i = 0; i < row; ++i) EXPECT_NEAR(z.data()[row + i], alone.data()[i], 1e-12);
}

TEST(ImageEncoder, TranslationCovariantInTheInterior) {
  ArchConfig arch = ArchConfig::desk();
  arch.resolution = 128;
  Rng init(5);
  std::mt19937_64 rng(6);
  const auto enc = ImageEncoder<double>::init(arch, init);
  const auto a = image_batch(1, 128, rng);
  auto b = image_batch(1, 128, rng);
  // b = a shifted right by one total stride (8 px); the first 8 columns stay random
  for (std::size_t y = 0; y < 128; ++y)
    for (std::size_t x = 8; x < 128; ++x) b.data()[y * 128 + x] = a.data()[y * 128 + x - 8];
  const auto za = encode_view(enc, a), zb = encode_view(enc, b);
  double worst = 0;
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 3; x <= 11; ++x)
        worst = std::max(worst, std::abs(za.data()[(c * 16 + y) * 16 + x] - zb.data()[(c * 16 + y) * 16 + x + 1]));
  EXPECT_LT(worst, 1e-10);
}

TEST(ImageEncoder, FiniteOnBoundedInputs) {
  Rng init(7);
  const auto enc = ImageEncoder<double>::init(ArchConfig::desk(), init);
  for (double fill : {0.0, 1.0}) {
    const auto z = encode_view(enc, Tensor<double>({2, 1, 64, 64}, fill));
    for (double v : z.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Stage1, FiniteLogitsAndDeterminism) {
  Rng init(8);
  std::mt19937_64 rng(9);
  auto arch = ArchConfig::desk();
  arch.num_classes = 26;
  const auto m = Stage1Model<double>::init(arch, init);
  const auto im = testutil::random_image(View::frontal, 64, rng);
  const auto a = stage1_forward(m, im), b = stage1_forward(m, im);
  ASSERT_EQ(a.shape(), (Shape{26}));
  for (std::size_t c = 0; c < 26; ++c) {
    EXPECT_TRUE(std::isfinite(a.data()[c]));
    EXPECT_EQ(a.data()[c], b.data()[c]);
  }
}

TEST(Stage1, GradientMatchesFiniteDifferencesEverywhere) {
  const auto arch = tiny_arch();
  Rng init(10);
  std::mt19937_64 rng(11);
  auto m = Stage1Model<double>::init(arch, init);
  const auto x = image_batch(1, 16, rng);
  LabelVector y{{1.0, 0.0, 0.3}, {1, 1, 1}, LabelKind::soft_pseudo};
  ASLParams asl;
  asl.class_weights = {0.5, 1.0, 1.5};
  auto params = params_of(m);
  EXPECT_GT(params.size(), 10u);
  EXPECT_LT(fd_error([&] { return asl_loss_sum(stage1_forward(m, x), y, asl); }, params), 1e-6);
}

TEST(TextEncoder, ClsAloneAndDeterminism) {
  Rng init(12);
  const auto enc = TextEncoder<double>::init(ArchConfig::desk(), init);
  const std::vector<std::size_t> cls_only = {kClsId};
  const auto e = encode_text(enc, cls_only);
  EXPECT_EQ(e.sequence.shape(), (Shape{1, 32}));
  EXPECT_EQ(e.cls.shape(), (Shape{32}));
  const std::vector<std::size_t> ids = {kClsId, 5, 9, 17, 3};
  const auto a = encode_text(enc, ids), b = encode_text(enc, ids);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(a.cls.data()[i], b.cls.data()[i]);
  EXPECT_THROW(encode_text(enc, std::vector<std::size_t>{}), InputError);
  EXPECT_THROW(encode_text(enc, std::vector<std::size_t>{kClsId, 100000}), InputError);
  EXPECT_THROW(encode_text(enc, std::vector<std::size_t>(65, 2)), InputError);
}

TEST(TextEncoder, WordOrderReachesCls) {
  Rng init(13);
  const auto enc = TextEncoder<double>::init(ArchConfig::desk(), init);
  const std::vector<std::size_t> fwd = {kClsId, 5, 9, 17, 3}, rev = {kClsId, 3, 17, 9, 5};
  const auto a = encode_text(enc, fwd), b = encode_text(enc, rev);
  EXPECT_GT(max_abs_diff(a.cls.data(), b.cls.data()), 1e-6);
}

TEST(TextEncoder, GradientMatchesFiniteDifferences) {
  const auto arch = tiny_arch();
  Rng init(14);
  auto enc = TextEncoder<double>::init(arch, init);
  const std::vector<std::size_t> ids = {kClsId, 4, 7, 4, 2};
  EXPECT_LT(fd_error([&] { return testutil::project(encode_text(enc, ids).cls); }, params_of(enc)), 1e-6);
}

TEST(SpatialProjection, ShapeZeroInputAndAffineLaw) {
  Rng init(15);
  std::mt19937_64 rng(16);
  auto proj = SpatialProjection<double>::init(ArchConfig::desk(), init);
  const auto zero = cls_to_spatial(proj, Tensor<double>({32}));
  EXPECT_EQ(zero.shape(), (Shape{1, 32, 4, 4}));
  for (std::size_t i = 0; i < zero.size(); ++i) EXPECT_EQ(zero.data()[i], proj.projection.bias.data()[i]);

  auto u = testutil::random_param({32}, rng), v = testutil::random_param({32}, rng);
  const double a = 0.7, b = -1.9;
  std::vector<double> mix(32);
  for (std::size_t i = 0; i < 32; ++i) mix[i] = a * u.data()[i] + b * v.data()[i];
  const auto lhs = cls_to_spatial(proj, Tensor<double>({32}, mix));
  const auto pu = cls_to_spatial(proj, u), pv = cls_to_spatial(proj, v);
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    const double rhs = a * pu.data()[i] + b * pv.data()[i] - (a + b - 1.0) * proj.projection.bias.data()[i];
    EXPECT_NEAR(lhs.data()[i], rhs, 1e-10);
  }
  EXPECT_THROW(cls_to_spatial(proj, Tensor<double>({31})), InputError);
}

TEST(SpatialProjection, PlaceholdersAreStableAndDistinct) {
  Rng init(17);
  auto proj = SpatialProjection<double>::init(ArchConfig::desk(), init);
  const auto a = placeholder_block(proj, TextModality::indication);
  const auto b = placeholder_block(proj, TextModality::indication);
  const auto v = placeholder_block(proj, TextModality::vitals);
  EXPECT_EQ(a.shape(), (Shape{1, 32, 4, 4}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
  EXPECT_GT(max_abs_diff(a.data(), v.data()), 0.0);
}

TEST(ViewEncoders, ParametersAreDisjoint) {
  Rng init(18);
  std::mt19937_64 rng(19);
  auto arch = ArchConfig::desk();
  auto m = CamchexModel<double>::init(arch, init);
  std::vector<Tensor<double>> f = params_of(m.frontal), l = params_of(m.lateral);
  ASSERT_EQ(f.size(), l.size());
  for (auto& a : f)
    for (auto& b : l) EXPECT_FALSE(a.same_storage(b));
  const auto x = image_batch(1, 64, rng);
  const auto before = encode_view(m.lateral, x);
  for (auto& t : f)
    for (auto& v : t.data()) v += 0.5;
  const auto after = encode_view(m.lateral, x);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.data()[i], after.data()[i]);
  // copies made for training own their storage too
  auto copy = deep_copy(m.frontal);
  auto cf = params_of(copy);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_FALSE(cf[i].same_storage(f[i]));
}

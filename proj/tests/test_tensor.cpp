#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mkga/gradcheck.hpp"
#include "mkga/module.hpp"
#include "mkga/ops.hpp"
#include "mkga/rng.hpp"

using namespace mkga;

namespace {

Tensor<double> randn(const Shape& s, Rng& rng) {
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = rng.normal();
  return t;
}

// Direct nested-loop cross-correlation.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, std::size_t stride,
                               std::size_t pad, std::size_t dil, std::size_t& oh, std::size_t& ow) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0), k = w.dim(2);
  oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::size_t b0 = 0; b0 < n; ++b0)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = b.defined() ? b.storage()[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky * dil) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx * dil) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                s += x.storage()[((b0 * ci + c) * h + iy) * wd + ix] * w.storage()[((o * ci + c) * k + ky) * k + kx];
              }
          out[((b0 * co + o) * oh + y) * ow + xx] = s;
        }
  return out;
}

}  // namespace

TEST(Conv2d, ZeroInputGivesBias) {
  Rng rng(1);
  auto w = randn({3, 2, 3, 3}, rng);
  Tensor<double> b(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  auto y = conv2d(Tensor<double>::zeros({2, 2, 5, 5}), w, b, {1, 1, 1});
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.storage()[i], b.storage()[(i / 25) % 3]);
}

TEST(Conv2d, IdentityKernelReturnsInput) {
  Rng rng(2);
  auto x = randn({1, 1, 6, 6}, rng);
  Tensor<double> w({1, 1, 3, 3});
  w.storage()[4] = 1.0;
  auto y = conv2d(x, w, Tensor<double>{}, {1, 1, 1});
  EXPECT_EQ(y.storage(), x.storage());
}

TEST(Conv2d, DilatedImpulseHitsNineOffsets) {
  Tensor<double> x({1, 1, 5, 5});
  x.storage()[12] = 1.0;
  auto y = conv2d(x, Tensor<double>::ones({1, 1, 3, 3}), Tensor<double>{}, {1, 2, 2});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 5, 5}));
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) {
      const bool hit = (r == 0 || r == 2 || r == 4) && (c == 0 || c == 2 || c == 4);
      EXPECT_EQ(y.storage()[r * 5 + c], hit ? 1.0 : 0.0) << r << "," << c;
    }
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(3);
  for (std::size_t trial = 0; trial < 24; ++trial) {
    const std::size_t k = 1 + 2 * (trial % 3), stride = 1 + trial % 2, dil = 1 + (trial / 3) % 3, pad = trial % 4;
    auto x = randn({2, 3, 9, 8}, rng), w = randn({4, 3, k, k}, rng), b = randn({4}, rng);
    if (9 + 2 * pad < dil * (k - 1) + 1) continue;
    std::size_t oh = 0, ow = 0;
    const auto ref = naive_conv(x, w, b, stride, pad, dil, oh, ow);
    auto y = conv2d(x, w, b, {stride, pad, dil});
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.storage()[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, DilationTwoReceptiveFieldLocality) {
  Rng rng(4);
  auto x = randn({1, 1, 9, 9}, rng), w = randn({1, 1, 3, 3}, rng);
  const auto base = conv2d(x, w, Tensor<double>{}, {1, 2, 2}).storage();
  const int py = 4, px = 4;
  for (int iy = 0; iy < 9; ++iy)
    for (int ix = 0; ix < 9; ++ix) {
      auto x2 = x.clone();
      x2.storage()[iy * 9 + ix] += 1.0;
      const auto y2 = conv2d(x2, w, Tensor<double>{}, {1, 2, 2}).storage();
      const bool in_field = (iy - py == -2 || iy == py || iy - py == 2) && (ix - px == -2 || ix == px || ix - px == 2);
      EXPECT_EQ(y2[py * 9 + px] != base[py * 9 + px], in_field) << iy << "," << ix;
    }
}

TEST(Conv2d, ChannelMismatchNamesBothShapes) {
  try {
    conv2d(Tensor<double>({1, 3, 4, 4}), Tensor<double>({2, 5, 3, 3}), Tensor<double>{});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[1,3,4,4]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,5,3,3]"), std::string::npos);
  }
}

TEST(GroupNorm, HandComputedExample) {
  Tensor<double> x(Shape{1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  auto y = group_norm(x, 1, Tensor<double>::ones({1}), Tensor<double>::zeros({1}), 1e-5);
  const double sd = std::sqrt(1.25 + 1e-5);
  const double expect[] = {-1.5 / sd, -0.5 / sd, 0.5 / sd, 1.5 / sd};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.storage()[i], expect[i], 1e-12);
  EXPECT_NEAR(y.storage()[0], -1.3416, 1e-4);
  EXPECT_NEAR(y.storage()[1], -0.4472, 1e-4);
}

TEST(GroupNorm, ConstantInputAndAffineOnly) {
  Tensor<double> x({2, 4, 3, 3}, 7.0);
  auto y = group_norm(x, 2, Tensor<double>::ones({4}), Tensor<double>::zeros({4}));
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
  Rng rng(5);
  auto z = group_norm(randn({2, 4, 3, 3}, rng), 2, Tensor<double>::zeros({4}), Tensor<double>({4}, 0.25));
  for (double v : z.storage()) EXPECT_EQ(v, 0.25);
}

TEST(GroupNorm, IndivisibleChannelsIsConfigError) {
  EXPECT_THROW(group_norm(Tensor<double>({1, 6, 2, 2}), 4, Tensor<double>::ones({6}), Tensor<double>::zeros({6})), ConfigError);
  EXPECT_EQ(resolve_groups(12, 8), 6u);
  EXPECT_EQ(resolve_groups(16, 8), 8u);
  EXPECT_EQ(resolve_groups(5, 8), 5u);
}

TEST(Elementwise, SigmoidAndConcatAndUpsample) {
  EXPECT_EQ(sigmoid(Tensor<double>::scalar(0.0)).item(), 0.5);
  for (double v : {-1e4, -50.0, 50.0, 1e4}) {
    const double s = sigmoid(Tensor<double>::scalar(v)).item();
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  for (float v : {-1e4f, -200.0f, 200.0f, 1e4f}) {
    const float s = sigmoid(Tensor<float>::scalar(v)).item();
    EXPECT_GT(s, 0.0f);
    EXPECT_LT(s, 1.0f);
  }
  auto c = concat_channels<double>({Tensor<double>({2, 8, 3, 3}), Tensor<double>({2, 16, 3, 3})});
  EXPECT_EQ(c.shape(), (Shape{2, 24, 3, 3}));
  EXPECT_THROW(concat_channels<double>({Tensor<double>({2, 8, 3, 3}), Tensor<double>({2, 8, 4, 3})}), ShapeError);

  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto up = upsample(x, 2, UpsampleMode::kNearest);
  ASSERT_EQ(up.shape(), (Shape{1, 1, 4, 4}));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t col = 0; col < 4; ++col) EXPECT_EQ(up.storage()[r * 4 + col], x.storage()[(r / 2) * 2 + col / 2]);
}

TEST(Elementwise, BilinearUpsampleHalfPixelCenters) {
  Tensor<double> sq(Shape{1, 1, 2, 2}, std::vector<double>{0, 4, 0, 4});
  auto up = upsample(sq, 2, UpsampleMode::kBilinear);
  // Source coordinate of output column j is (j + 0.5) / 2 - 0.5, clamped.
  const double row[] = {0, 1, 3, 4};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(up.storage()[r * 4 + c], row[c], 1e-12);
}

TEST(Elementwise, SoftmaxRowsAndLogConsistency) {
  Rng rng(6);
  auto x = randn({3, 5, 2}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = softmax(x, axis), ls = log_softmax(x, axis);
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(std::exp(ls.storage()[i]), s.storage()[i], 1e-12);
  }
  auto s = softmax(x, 1);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t c = 0; c < 2; ++c) {
      double t = 0;
      for (std::size_t k = 0; k < 5; ++k) t += s.storage()[(a * 5 + k) * 2 + c];
      EXPECT_NEAR(t, 1.0, 1e-12);
    }
  Tensor<float> big(Shape{1, 2}, std::vector<float>{1000.0f, -1000.0f});
  auto sb = softmax(big, 1);
  EXPECT_TRUE(std::isfinite(sb.storage()[0]));
  EXPECT_NEAR(sb.storage()[0], 1.0f, 1e-6);
}

TEST(Elementwise, GlobalAvgPoolAndLinear) {
  Tensor<double> x(Shape{1, 2, 1, 2}, std::vector<double>{1, 3, 10, 20});
  auto p = global_avg_pool(x);
  EXPECT_EQ(p.shape(), (Shape{1, 2}));
  EXPECT_EQ(p.storage()[0], 2.0);
  EXPECT_EQ(p.storage()[1], 15.0);
  Tensor<double> w(Shape{1, 2}, std::vector<double>{2, -1});
  auto y = linear(p, w, Tensor<double>(Shape{1}, std::vector<double>{0.5}));
  EXPECT_EQ(y.item(), 2 * 2.0 - 15.0 + 0.5);
  EXPECT_THROW(add(Tensor<double>({2, 3}), Tensor<double>({3, 2})), ShapeError);
}

TEST(Attention, SingleTokenIsValueThenOutput) {
  Rng rng(7);
  Linear<double> q(4, 4, rng), k(4, 4, rng), v(4, 4, rng), o(4, 4, rng);
  auto x = randn({2, 1, 4}, rng);
  auto fw = [](Linear<double>& l) { return [&l](const Tensor<double>& t) { return l.forward(t); }; };
  auto y = multi_head_attention(x, 2, fw(q), fw(k), fw(v), fw(o));
  auto ref = o.forward(v.forward(x));
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.storage()[i], ref.storage()[i], 1e-12);
}

TEST(Attention, IdentityProjectionsKeepConstantTokens) {
  auto id = [](const Tensor<double>& t) { return t; };
  Tensor<double> x({1, 3, 4});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t d = 0; d < 4; ++d) x.storage()[t * 4 + d] = 0.3 * d - 0.1;
  auto y = multi_head_attention(x, 2, id, id, id, id);
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(y.storage()[t * 4 + d], y.storage()[d], 1e-12);
}

TEST(Attention, TwoTokenHandComputation) {
  // 1 head, D=2, q = k = v = identity, o = identity. Tokens a=(1,0), b=(0,1).
  auto id = [](const Tensor<double>& t) { return t; };
  Tensor<double> x(Shape{1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  auto y = multi_head_attention(x, 1, id, id, id, id);
  // Scores for token a: [a.a, a.b] / sqrt(2) = [1/sqrt2, 0].
  const double e = std::exp(1.0 / std::sqrt(2.0));
  const double wa = e / (e + 1.0), wb = 1.0 / (e + 1.0);
  EXPECT_NEAR(y.storage()[0], wa, 1e-12);
  EXPECT_NEAR(y.storage()[1], wb, 1e-12);
  EXPECT_NEAR(y.storage()[2], wb, 1e-12);
  EXPECT_NEAR(y.storage()[3], wa, 1e-12);
  EXPECT_THROW(multi_head_attention(Tensor<double>({1, 2, 6}), 4, id, id, id, id), ConfigError);
}

TEST(Backward, BasicRulesAndAccumulation) {
  Rng rng(8);
  auto x = randn({3, 4}, rng);
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], 2 * x.storage()[i]);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], 4 * x.storage()[i]);

  Tensor<double> a({2, 2}, 1.0, true), b({2, 2}, 3.0, true);
  sum(add(a, b)).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad()) EXPECT_EQ(g, 1.0);
  EXPECT_THROW(add(a, b).backward(), UsageError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor<double> a({2}, 1.0, true);
  Tensor<double> y;
  {
    NoGradGuard g;
    y = sum(mul(a, a));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(9);
    auto x = randn({2, 3, 6, 6}, rng), w = randn({4, 3, 3, 3}, rng);
    w.set_requires_grad(true);
    sum(relu(group_norm(conv2d(x, w, Tensor<double>{}, {1, 2, 2}), 2, Tensor<double>::ones({4}), Tensor<double>::zeros({4})))).backward();
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(FiniteDiff, QuadraticAndConvSelfTests) {
  Rng rng(10);
  auto w = randn({7}, rng);
  auto q = finite_diff_check([&] { return sum(mul(w, w)); }, {{"w", w}});
  EXPECT_LT(q.max_rel_error, 1e-9);
  EXPECT_EQ(q.coordinates, 7u);

  auto x = randn({1, 2, 5, 5}, rng), k = randn({3, 2, 3, 3}, rng);
  auto c = finite_diff_check([&] { return sum(conv2d(x, k, Tensor<double>{}, {1, 1, 1})); }, {{"x", x}, {"k", k}});
  EXPECT_LT(c.max_rel_error, 1e-6);
}

TEST(FiniteDiff, NonFiniteLossNamesParameter) {
  Tensor<double> w(Shape{2}, std::vector<double>{1.0, 1e-4});
  auto f = [&] {
    auto inv = Tensor<double>(Shape{2}, std::vector<double>{std::log(w.storage()[0]), std::log(w.storage()[1])});
    return add(sum(mul(w, w)), sum(inv));
  };
  try {
    finite_diff_check(f, {{"w", w}});
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("w[1]"), std::string::npos);
  }
}

TEST(FiniteDiff, ReluKinksAreExcludedAndCounted) {
  Tensor<double> x(Shape{3}, std::vector<double>{-2e-4, 0.5, -0.7});
  auto r = finite_diff_check([&] { return sum(relu(x)); }, {{"x", x}});
  EXPECT_EQ(r.kinks_skipped, 1u);
  EXPECT_EQ(r.coordinates, 2u);
  EXPECT_LT(r.max_rel_error, 1e-12);
  GradCheckOptions strict;
  strict.skip_relu_kinks = false;
  EXPECT_GT(finite_diff_check([&] { return sum(relu(x)); }, {{"x", x}}, strict).max_rel_error, 0.1);
}

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mkga/gradcheck.hpp"
#include "mkga/losses.hpp"
#include "mkga/optim.hpp"

using namespace mkga;

namespace {

Tensor<double> randn(const Shape& s, Rng& rng, double sd = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.storage()) v = rng.normal(0.0, sd);
  return t;
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

ModelOutputs<double> random_outputs(std::size_t n, std::size_t hw, Rng& rng) {
  return {randn({n, 2, hw, hw}, rng), randn({n, 2}, rng), randn({n, 3}, rng)};
}

Targets random_targets(std::size_t n, std::size_t hw, Rng& rng) {
  Targets t;
  t.masks.resize(n * hw * hw);
  for (auto& m : t.masks) m = rng.uniform() < 0.3;
  for (std::size_t i = 0; i < n; ++i) {
    t.malignancy.push_back(static_cast<int>(rng.below(1 + 1)));
    t.position.push_back(static_cast<int>(rng.below(2 + 1)));
  }
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(DiceLoss, PerfectOverlapIsNearZero) {
  std::vector<std::uint8_t> mask(64 * 64);
  for (std::size_t i = 0; i < mask.size() / 2; ++i) mask[i] = 1;
  Tensor<double> probs({1, 64, 64});
  for (std::size_t i = 0; i < mask.size(); ++i) probs.storage()[i] = mask[i];
  EXPECT_LT(dice_loss(probs, mask).item(), 1e-6);
}

TEST(DiceLoss, DisjointIsNearOne) {
  std::vector<std::uint8_t> mask(16 * 16);
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
  Tensor<double> probs({1, 16, 16});
  for (std::size_t i = 0; i < mask.size(); ++i) probs.storage()[i] = 1.0 - mask[i];
  EXPECT_GE(dice_loss(probs, mask).item(), 1.0 - 1e-5);
}

TEST(DiceLoss, UniformHalfOnHalfMask) {
  std::vector<std::uint8_t> mask(16, 0);
  for (std::size_t i = 0; i < 8; ++i) mask[i] = 1;
  EXPECT_NEAR(dice_loss(Tensor<double>({1, 4, 4}, 0.5), mask).item(), 0.5, 1e-7);
}

TEST(DiceLoss, TwoChannelInputUsesForeground) {
  Rng rng(1);
  const auto logits = randn({2, 2, 5, 5}, rng);
  std::vector<std::uint8_t> mask(50);
  for (auto& m : mask) m = rng.uniform() < 0.5;
  const auto probs = softmax(logits, 1);
  Tensor<double> fg({2, 5, 5});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 25; ++i) fg.storage()[n * 25 + i] = probs.storage()[(n * 2 + 1) * 25 + i];
  EXPECT_NEAR(dice_loss(probs, mask).item(), dice_loss(fg, mask).item(), 1e-12);
  // Independent per-sample formula.
  double expect = 0.0;
  for (std::size_t n = 0; n < 2; ++n) {
    double inter = 0, sp = 0, sg = 0;
    for (std::size_t i = 0; i < 25; ++i) {
      inter += fg.storage()[n * 25 + i] * mask[n * 25 + i];
      sp += fg.storage()[n * 25 + i];
      sg += mask[n * 25 + i];
    }
    expect += 1.0 - (2 * inter + 1e-6) / (sp + sg + 1e-6);
  }
  EXPECT_NEAR(dice_loss(fg, mask).item(), expect / 2, 1e-12);
}

TEST(DiceLoss, RangeIsUnitInterval) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<double> p({2, 6, 6});
    for (auto& v : p.storage()) v = rng.uniform();
    std::vector<std::uint8_t> mask(72);
    const double density = rng.uniform();
    for (auto& m : mask) m = rng.uniform() < density;
    const double l = dice_loss(p, mask).item();
    EXPECT_GE(l, -1e-9);
    EXPECT_LE(l, 1.0 + 1e-9);
  }
}

TEST(DiceLoss, InvalidTargetRejected) {
  std::vector<std::uint8_t> mask = {0, 1, 2, 0};
  EXPECT_THROW(dice_loss(Tensor<double>({1, 2, 2}, 0.5), mask), ValidationError);
  std::vector<std::uint8_t> short_mask = {0, 1};
  EXPECT_THROW(dice_loss(Tensor<double>({1, 2, 2}, 0.5), short_mask), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(CrossEntropy, HandExamples) {
  const std::vector<int> zero = {0};
  EXPECT_NEAR(image_ce(Tensor<double>(Shape{1, 2}, std::vector<double>{1.0, 0.0}), zero).item(), 0.313262, 1e-6);
  EXPECT_NEAR(image_ce(Tensor<double>(Shape{1, 2}, std::vector<double>{0.0, 0.0}), zero).item(), std::log(2.0), 1e-12);
  EXPECT_LT(image_ce(Tensor<double>(Shape{1, 2}, std::vector<double>{1e4, 0.0}), zero).item(), 1e-4);
  EXPECT_LT(image_ce(Tensor<float>(Shape{1, 2}, std::vector<float>{1e4f, 0.0f}), zero).item(), 1e-4f);
}

TEST(CrossEntropy, PixelCeMatchesLogSumExp) {
  Rng rng(3);
  const auto logits = randn({2, 2, 3, 3}, rng);
  std::vector<std::uint8_t> mask(18);
  for (auto& m : mask) m = rng.uniform() < 0.5;
  double expect = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 9; ++i) {
      const double a = logits.storage()[(n * 2) * 9 + i], b = logits.storage()[(n * 2 + 1) * 9 + i];
      const double lse = std::log(std::exp(a) + std::exp(b));
      expect += lse - (mask[n * 9 + i] ? b : a);
    }
  EXPECT_NEAR(pixel_ce(logits, mask).item(), expect / 18, 1e-12);
}

TEST(CrossEntropy, AbsentLabelsAreExcludedFromMean) {
  Tensor<double> logits(Shape{3, 3}, std::vector<double>{2.0, 0.0, 0.0, 5.0, -5.0, 9.0, 0.0, 1.0, 0.0});
  const std::vector<int> labels = {0, kAbsent, 1};
  std::size_t labeled = 0;
  const double got = image_ce(logits, labels, &labeled).item();
  const double l0 = std::log(std::exp(2.0) + 2.0) - 2.0, l2 = std::log(2.0 + std::exp(1.0)) - 1.0;
  EXPECT_EQ(labeled, 2u);
  EXPECT_NEAR(got, (l0 + l2) / 2, 1e-12);
  const std::vector<int> none = {kAbsent, kAbsent, kAbsent};
  EXPECT_EQ(image_ce(logits, none, &labeled).item(), 0.0);
  EXPECT_EQ(labeled, 0u);
}

TEST(CrossEntropy, OutOfRangeLabelRejected) {
  const std::vector<int> bad = {3};
  EXPECT_THROW(image_ce(Tensor<double>({1, 3}), bad), ValidationError);
  std::vector<std::uint8_t> mask = {0, 5, 0, 0};
  EXPECT_THROW(pixel_ce(Tensor<double>({1, 2, 2, 2}), mask), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(TotalLoss, ComponentsRecombineToTotal) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = random_outputs(3, 4, rng);
    const auto t = random_targets(3, 4, rng);
    const LossWeights w{rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)};
    const auto l = total_loss(out, t, w);
    EXPECT_NEAR(l.total.item() - (l.seg.item() + w.lambda_mal * l.mal.item() + w.lambda_pos * l.pos.item()), 0.0, 1e-9);
    EXPECT_TRUE(l.mal_present);
    EXPECT_TRUE(l.pos_present);
  }
}

TEST(TotalLoss, ZeroWeightsGiveSegmentationLoss) {
  Rng rng(5);
  const auto out = random_outputs(2, 4, rng);
  const auto t = random_targets(2, 4, rng);
  const auto l = total_loss(out, t, LossWeights{0.0, 0.0});
  EXPECT_EQ(l.total.item(), l.seg.item());
  const auto probs = softmax(out.seg_logits, 1);
  EXPECT_NEAR(l.seg.item(), dice_loss(probs, t.masks).item() + pixel_ce(out.seg_logits, t.masks).item(), 1e-12);
}

TEST(TotalLoss, MissingPositionLabelsReportedAbsent) {
  Rng rng(6);
  const auto out = random_outputs(2, 4, rng);
  auto t = random_targets(2, 4, rng);
  t.position = {kAbsent, kAbsent};
  const auto l = total_loss(out, t, LossWeights{1.0, 5.0});
  EXPECT_FALSE(l.pos_present);
  EXPECT_EQ(l.pos.item(), 0.0);
  EXPECT_NEAR(l.total.item(), l.seg.item() + l.mal.item(), 1e-12);
}

TEST(TotalLoss, ErrorsOnEmptyBatchAndNegativeWeights) {
  Rng rng(7);
  ModelOutputs<double> empty{Tensor<double>({0, 2, 4, 4}), Tensor<double>({0, 2}), Tensor<double>({0, 3})};
  EXPECT_THROW(total_loss(empty, Targets{}, LossWeights{}), UsageError);
  const auto out = random_outputs(1, 4, rng);
  const auto t = random_targets(1, 4, rng);
  EXPECT_THROW(total_loss(out, t, LossWeights{-1.0, 1.0}), ConfigError);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  const auto out = random_outputs(2, 3, rng);
  auto t = random_targets(2, 3, rng);
  t.position[1] = kAbsent;
  const LossWeights w{0.7, 1.3};
  const auto res = finite_diff_check(
      [=] { return total_loss(ModelOutputs<double>{out.seg_logits, out.mal_logits, out.pos_logits}, t, w).total; },
      {{"seg", out.seg_logits}, {"mal", out.mal_logits}, {"pos", out.pos_logits}});
  EXPECT_LT(res.max_rel_error, 1e-6);
}

// ---------------------------------------------------------------------------

TEST(PcGrad, HandProjection) {
  TaskGradients tg{{"a", "b"}, {{1.0, 0.0}, {-1.0, 1.0}}};
  Rng rng(9);
  const auto out = pcgrad(tg, rng);
  // g1' = (0.5, 0.5), g2' = (-1, 1) + (1, 0) = (0, 1).
  EXPECT_NEAR(out[0], 0.5, 1e-15);
  EXPECT_NEAR(out[1], 1.5, 1e-15);
  const std::vector<double> g1p = {0.5, 0.5};
  EXPECT_NEAR(dot(g1p, tg.grads[1]), 0.0, 1e-15);
}

TEST(PcGrad, NoConflictIsBitwiseSum) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    TaskGradients tg;
    for (int k = 0; k < 3; ++k) {
      auto g = random_vec(20, rng);
      for (auto& v : g) v = std::abs(v);
      tg.tasks.push_back("t" + std::to_string(k));
      tg.grads.push_back(g);
    }
    std::vector<double> sum(20, 0.0);
    for (const auto& g : tg.grads)
      for (std::size_t i = 0; i < 20; ++i) sum[i] += g[i];
    EXPECT_EQ(pcgrad(tg, rng), sum);
  }
}

TEST(PcGrad, TwoTaskOrthogonalityOverRandomTrials) {
  Rng rng(11);
  int conflicts = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.below(30 + 1));
    const auto g1 = random_vec(n, rng), g2 = random_vec(n, rng);
    TaskGradients tg{{"a", "b"}, {g1, g2}};
    const auto combined = pcgrad(tg, rng);
    // Reconstruct the individual surgered gradients from the rule.
    auto surgered = [](std::vector<double> gi, const std::vector<double>& gj) {
      const double d = dot(gi, gj);
      if (d < 0) {
        const double c = d / dot(gj, gj);
        for (std::size_t x = 0; x < gi.size(); ++x) gi[x] -= c * gj[x];
      }
      return gi;
    };
    const auto p1 = surgered(g1, g2), p2 = surgered(g2, g1);
    conflicts += dot(g1, g2) < 0;
    EXPECT_GE(dot(p1, g2), -1e-9);
    EXPECT_GE(dot(p2, g1), -1e-9);
    for (std::size_t x = 0; x < n; ++x) EXPECT_NEAR(combined[x], p1[x] + p2[x], 1e-12);
  }
  EXPECT_GT(conflicts, 300);
}

TEST(PcGrad, TriangleNormBound) {
  Rng rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t k = 2 + static_cast<std::size_t>(rng.below(3 + 1));
    TaskGradients tg;
    for (std::size_t i = 0; i < k; ++i) {
      tg.tasks.push_back(std::to_string(i));
      tg.grads.push_back(random_vec(8, rng));
    }
    const auto surgered = pcgrad_project(tg, rng);
    ASSERT_EQ(surgered.size(), k);
    for (std::size_t i = 0; i < k; ++i) {
      double bound = norm(tg.grads[i]);
      for (std::size_t j = 0; j < k; ++j)
        if (j != i) bound += norm(tg.grads[j]);
      EXPECT_LE(norm(surgered[i]), bound + 1e-12);
    }
  }
}

TEST(PcGrad, ZeroGradientPartnerIsSkipped) {
  TaskGradients tg{{"a", "b"}, {{1.0, -2.0}, {0.0, 0.0}}};
  Rng rng(13);
  const auto out = pcgrad(tg, rng);
  EXPECT_EQ(out, (std::vector<double>{1.0, -2.0}));
}

TEST(PcGrad, Errors) {
  Rng rng(14);
  EXPECT_THROW(pcgrad(TaskGradients{{"a"}, {{1.0}}}, rng), UsageError);
  EXPECT_THROW(pcgrad(TaskGradients{{"a", "b"}, {{1.0}, {1.0, 2.0}}}, rng), ShapeError);
  EXPECT_THROW(pcgrad(TaskGradients{{"a", "b"}, {{1.0}, {std::numeric_limits<double>::quiet_NaN()}}}, rng), NumericalError);
}

TEST(PcGrad, ShuffleOrderIsSeeded) {
  Rng data(15);
  TaskGradients tg;
  for (int k = 0; k < 3; ++k) {
    tg.tasks.push_back(std::to_string(k));
    tg.grads.push_back(random_vec(5, data));
  }
  Rng a(99), b(99);
  EXPECT_EQ(pcgrad(tg, a), pcgrad(tg, b));
}

TEST(FlatGradients, RoundTripThroughParameters) {
  Parameter<double> p1{"a", Tensor<double>({2, 2}), true}, p2{"b", Tensor<double>({3}), true};
  p1.tensor.set_requires_grad(true);
  p2.tensor.set_requires_grad(true);
  std::vector<Parameter<double>*> ps = {&p1, &p2};
  const std::vector<double> flat = {1, 2, 3, 4, 5, 6, 7};
  assign_grads(ps, flat);
  EXPECT_EQ(flatten_grads(ps), flat);
  EXPECT_THROW(assign_grads(ps, std::vector<double>{1, 2}), ShapeError);
  EXPECT_THROW(assign_grads(ps, std::vector<double>(8, 0.0)), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(AdamW, FirstStepHandAlgebra) {
  std::vector<double> w = {1.0}, g = {1.0};
  AdamState s;
  adamw_update<double>(w, g, s, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(w[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledDecayOnly) {
  std::vector<double> w = {1.0}, g = {0.0};
  AdamState s;
  adamw_update<double>(w, g, s, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
  EXPECT_NEAR(w[0], 0.999, 1e-15);
}

TEST(AdamW, ZeroGradientZeroDecayIsNoOp) {
  std::vector<double> w = {0.3, -2.0, 7.0}, g(3, 0.0);
  const auto before = w;
  AdamState s;
  for (int i = 0; i < 5; ++i) adamw_update<double>(w, g, s, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(w, before);
}

TEST(AdamW, NoDecayEqualsAdamOnFixedTrace) {
  Rng rng(16);
  const std::size_t n = 6;
  std::vector<double> w(n), ref;
  for (auto& v : w) v = rng.normal();
  ref = w;
  std::vector<double> m(n, 0.0), v(n, 0.0);
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  AdamState s;
  for (int t = 1; t <= 50; ++t) {
    const auto g = random_vec(n, rng);
    adamw_update<double>(w, g, s, AdamWOptions{lr, b1, b2, eps, 0.0});
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
      ref[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(w[i], ref[i], 1e-14) << "step " << t;
  }
}

TEST(AdamW, NonFiniteGradientAbortsWithoutUpdating) {
  Parameter<double> a{"layer.weight", Tensor<double>(Shape{2}, std::vector<double>{1.0, 2.0}), true};
  Parameter<double> b{"layer.bias", Tensor<double>(Shape{1}, std::vector<double>{3.0}), true};
  a.tensor.set_requires_grad(true);
  b.tensor.set_requires_grad(true);
  std::vector<Parameter<double>*> ps = {&a, &b};
  assign_grads(ps, std::vector<double>{0.5, 0.5, std::numeric_limits<double>::infinity()});
  AdamW<double> opt(ps, AdamWOptions{});
  try {
    opt.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.bias"), std::string::npos) << e.what();
  }
  EXPECT_EQ(a.tensor.storage(), (std::vector<double>{1.0, 2.0}));
}

TEST(AdamW, FrozenParameterRejected) {
  Parameter<double> a{"frozen", Tensor<double>({1}), false};
  EXPECT_THROW(AdamW<double>({&a}, AdamWOptions{}), ConfigError);
}

TEST(AdamW, MinimisesQuadratic) {
  Parameter<double> p{"x", Tensor<double>(Shape{2}, std::vector<double>{3.0, -4.0}), true};
  p.tensor.set_requires_grad(true);
  AdamW<double> opt({&p}, AdamWOptions{0.05, 0.9, 0.999, 1e-8, 0.0});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    sum(mul(p.tensor, p.tensor)).backward();
    opt.step();
  }
  EXPECT_LT(std::abs(p.tensor.storage()[0]), 0.05);
  EXPECT_LT(std::abs(p.tensor.storage()[1]), 0.05);
}

// ---------------------------------------------------------------------------

TEST(EarlyStopping, StrictlyDecreasingNeverStops) {
  std::vector<double> h;
  for (int i = 0; i < 50; ++i) h.push_back(1.0 / (i + 1));
  const auto d = early_stop(h, 1);
  EXPECT_FALSE(d.stop);
  EXPECT_EQ(d.best_epoch, 49u);
}

TEST(EarlyStopping, RuleTrace) {
  const std::vector<double> h = {1.0, 0.9, 0.95, 0.96, 0.97};
  const auto d = early_stop(h, 2);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.stop_epoch, 3u);
  EXPECT_EQ(d.best_epoch, 1u);
}

TEST(EarlyStopping, TieIsNotImprovement) {
  const std::vector<double> h = {1.0, 1.0, 1.0};
  const auto d = early_stop(h, 2);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.stop_epoch, 2u);
  EXPECT_EQ(d.best_epoch, 0u);
}

TEST(EarlyStopping, StopperStateAndPatienceValidation) {
  EarlyStopper s(3);
  EXPECT_FALSE(s.update(2.0));
  EXPECT_FALSE(s.update(1.5));
  EXPECT_FALSE(s.update(1.6));
  EXPECT_FALSE(s.update(1.4));
  EXPECT_EQ(s.best_epoch(), 3u);
  EXPECT_DOUBLE_EQ(s.best_loss(), 1.4);
  EXPECT_THROW(EarlyStopper(0), ConfigError);
}

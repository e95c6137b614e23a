#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mkga/rng.hpp"
#include "mkga/stats.hpp"

using namespace mkga;

namespace {

std::vector<std::uint8_t> random_mask(std::size_t n, double density, Rng& rng) {
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = rng.uniform() < density;
  return m;
}

// Exhaustive pairwise Mann-Whitney count.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

// Two-sided sign test by enumerating all 2^n discordance patterns.
double enumerate_binomial_p(std::size_t b, std::size_t c) {
  const std::size_t n = b + c, k = std::min(b, c);
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    const std::size_t ones = static_cast<std::size_t>(__builtin_popcountll(mask));
    hits += std::min(ones, n - ones) <= k;
  }
  return static_cast<double>(hits) / std::pow(2.0, static_cast<double>(n));
}

// Signed-rank p by enumerating every sign assignment over midranks of |d|.
double enumerate_wilcoxon_p(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double v : d)
    if (v != 0) nz.push_back(v);
  const std::size_t n = nz.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      less += std::abs(nz[j]) < std::abs(nz[i]);
      equal += std::abs(nz[j]) == std::abs(nz[i]);
    }
    ranks[i] = less + (equal + 1) / 2;
  }
  const double total = std::accumulate(ranks.begin(), ranks.end(), 0.0);
  double wp = 0;
  for (std::size_t i = 0; i < n; ++i) wp += nz[i] > 0 ? ranks[i] : 0.0;
  const double w = std::min(wp, total - wp);
  std::size_t hits = 0;
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) s += ranks[i];
    hits += std::min(s, total - s) <= w + 1e-9;
  }
  return static_cast<double>(hits) / std::pow(2.0, static_cast<double>(n));
}

// DeLong variance evaluated directly from the kernel psi over all pairs.
double brute_delong_variance(const std::vector<double>& a, const std::vector<double>& b, const std::vector<int>& l) {
  auto psi = [](double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); };
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < l.size(); ++i) (l[i] ? pos : neg).push_back(i);
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
  auto comps = [&](const std::vector<double>& s, std::vector<double>& v10, std::vector<double>& v01) {
    for (auto i : pos) {
      double t = 0;
      for (auto j : neg) t += psi(s[i], s[j]);
      v10.push_back(t / n);
    }
    for (auto j : neg) {
      double t = 0;
      for (auto i : pos) t += psi(s[i], s[j]);
      v01.push_back(t / m);
    }
  };
  std::vector<double> a10, a01, b10, b01;
  comps(a, a10, a01);
  comps(b, b10, b01);
  auto cov = [](const std::vector<double>& x, const std::vector<double>& y) {
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / x.size();
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
    return s / (x.size() - 1.0);
  };
  const double s10 = cov(a10, a10) + cov(b10, b10) - 2 * cov(a10, b10);
  const double s01 = cov(a01, a01) + cov(b01, b01) - 2 * cov(a01, b01);
  return s10 / m + s01 / n;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(DiceIou, HandExamples) {
  const std::vector<std::uint8_t> p = {1, 1, 1, 1, 0, 0, 0, 0}, g = {0, 0, 1, 1, 1, 1, 0, 0};
  const auto o = dice_iou(p, g);
  EXPECT_DOUBLE_EQ(o.dice, 0.5);
  EXPECT_DOUBLE_EQ(o.iou, 2.0 / 6.0);
  const auto same = dice_iou(p, p);
  EXPECT_EQ(same.dice, 1.0);
  EXPECT_EQ(same.iou, 1.0);
  const std::vector<std::uint8_t> q = {0, 0, 0, 0, 1, 1, 1, 1};
  const auto dis = dice_iou(p, q);
  EXPECT_EQ(dis.dice, 0.0);
  EXPECT_EQ(dis.iou, 0.0);
}

TEST(DiceIou, EmptyConventions) {
  const std::vector<std::uint8_t> empty(6, 0), some = {0, 1, 0, 0, 0, 0};
  EXPECT_EQ(dice_iou(empty, empty).dice, 1.0);
  EXPECT_EQ(dice_iou(empty, empty).iou, 1.0);
  EXPECT_EQ(dice_iou(empty, some).dice, 0.0);
  EXPECT_THROW(dice_iou(empty, std::vector<std::uint8_t>(5, 0)), ShapeError);
}

TEST(DiceIou, IdentityDiceFromIou) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    const auto p = random_mask(50, rng.uniform(), rng), g = random_mask(50, rng.uniform(), rng);
    const auto o = dice_iou(p, g);
    EXPECT_LE(o.iou, o.dice + 1e-15);
    EXPECT_NEAR(o.dice, 2 * o.iou / (1 + o.iou), 1e-12);
    EXPECT_GE(o.iou, 0.0);
    EXPECT_LE(o.dice, 1.0);
  }
}

// ---------------------------------------------------------------------------

TEST(Classification, HandExamples) {
  const std::vector<int> t = {1, 0, 1, 0};
  const auto perfect = accuracy_f1(t, t);
  EXPECT_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  const auto mixed = accuracy_f1(std::vector<int>{1, 1, 0, 0}, t);
  EXPECT_DOUBLE_EQ(mixed.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(mixed.f1, 0.5);
  const auto ones = accuracy_f1(std::vector<int>{1, 1, 1, 1}, t);
  EXPECT_DOUBLE_EQ(ones.accuracy, 0.5);
  EXPECT_NEAR(ones.f1, 2.0 / 3.0, 1e-15);
}

TEST(Classification, MacroF1CountsUnsupportedClassAsZero) {
  const std::vector<int> trues = {0, 0, 1, 1}, preds = {0, 0, 1, 1};
  const auto r = accuracy_macro_f1(preds, trues, 3);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-15);
  const std::vector<int> t3 = {0, 1, 2, 2}, p3 = {0, 2, 2, 1};
  // Per class: f1_0 = 1, f1_1 = 0, f1_2 = 2/(2+1+1) = 0.5.
  EXPECT_NEAR(accuracy_macro_f1(p3, t3, 3).f1, 0.5, 1e-15);
}

TEST(Classification, EmptyInputRejected) {
  const std::vector<int> none;
  EXPECT_THROW(accuracy_f1(none, none), ValidationError);
  EXPECT_THROW(accuracy_macro_f1(none, none, 3), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(Auc, HandExamples) {
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(auc(std::vector<double>(5, 0.3), std::vector<int>{0, 1, 0, 1, 1}), 0.5);
}

TEST(Auc, MatchesPairwiseCountingWithTies) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(5)) / 4.0;
      l[i] = static_cast<int>(rng.below(2));
    }
    l[0] = 0;
    l[1] = 1;
    EXPECT_NEAR(auc(s, l), pairwise_auc(s, l), 1e-12);
    std::vector<double> neg(s);
    for (auto& v : neg) v = -v;
    EXPECT_NEAR(auc(s, l) + auc(neg, l), 1.0, 1e-12);
  }
}

TEST(Auc, SingleClassIsUndefined) {
  try {
    auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("AUC undefined"), std::string::npos);
  }
}

TEST(Midranks, TiesShareMeanPosition) {
  EXPECT_EQ(midranks(std::vector<double>{3.0, 1.0, 3.0, 2.0}), (std::vector<double>{3.5, 1.0, 3.5, 2.0}));
}

// ---------------------------------------------------------------------------

TEST(McNemar, SymmetricDiscordanceGivesOne) {
  const std::vector<std::uint8_t> a = {1, 1, 1, 1, 0, 0, 0, 1, 0}, b = {1, 0, 0, 0, 1, 1, 1, 1, 0};
  const auto r = mcnemar(a, b);
  EXPECT_EQ(r.p_raw, 1.0);
  const auto none = mcnemar(a, a);
  EXPECT_EQ(none.p_raw, 1.0);
  EXPECT_EQ(none.statistic, 0.0);
}

TEST(McNemar, ExactHandExample) {
  // b = 10 (A right, B wrong), c = 2.
  std::vector<std::uint8_t> a, b;
  for (int i = 0; i < 10; ++i) a.push_back(1), b.push_back(0);
  for (int i = 0; i < 2; ++i) a.push_back(0), b.push_back(1);
  for (int i = 0; i < 7; ++i) a.push_back(1), b.push_back(1);
  const auto r = mcnemar(a, b);
  EXPECT_NEAR(r.p_raw, 158.0 / 4096.0, 1e-15);
  EXPECT_TRUE(r.significant);
}

TEST(McNemar, ChiSquareHandExample) {
  std::vector<std::uint8_t> a, b;
  for (int i = 0; i < 30; ++i) a.push_back(1), b.push_back(0);
  for (int i = 0; i < 10; ++i) a.push_back(0), b.push_back(1);
  const auto r = mcnemar(a, b);
  EXPECT_NEAR(r.statistic, 9.025, 1e-12);
  // Reference: scipy.stats.chi2.sf(9.025, 1).
  EXPECT_NEAR(r.p_raw, 0.002663119259138558, 1e-12);
}

TEST(McNemar, ExactBranchMatchesEnumeration) {
  for (std::size_t b = 0; b <= 12; ++b)
    for (std::size_t c = 0; b + c <= 12; ++c) {
      if (b + c == 0) continue;
      std::vector<std::uint8_t> x, y;
      for (std::size_t i = 0; i < b; ++i) x.push_back(1), y.push_back(0);
      for (std::size_t i = 0; i < c; ++i) x.push_back(0), y.push_back(1);
      EXPECT_NEAR(mcnemar(x, y).p_raw, enumerate_binomial_p(b, c), 1e-14) << b << "," << c;
    }
}

TEST(McNemar, UnpairedRejected) {
  EXPECT_THROW(mcnemar(std::vector<std::uint8_t>{1, 0}, std::vector<std::uint8_t>{1}), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(DeLong, IdenticalScoresGiveUnitP) {
  const std::vector<double> s = {0.2, 0.7, 0.4, 0.9, 0.1, 0.6};
  const std::vector<int> l = {0, 1, 0, 1, 0, 1};
  const auto r = delong(s, s, l);
  EXPECT_EQ(r.stat.statistic, 0.0);
  EXPECT_EQ(r.stat.p_raw, 1.0);
}

TEST(DeLong, HandDatasetMatchesBruteForceComponents) {
  const std::vector<int> l = {1, 1, 1, 0, 0, 0};
  const std::vector<double> a = {0.9, 0.6, 0.35, 0.5, 0.2, 0.1};
  const std::vector<double> b = {0.7, 0.3, 0.8, 0.4, 0.6, 0.3};
  const auto r = delong(a, b, l);
  EXPECT_NEAR(r.auc_a, auc(a, l), 1e-12);
  EXPECT_NEAR(r.auc_b, auc(b, l), 1e-12);
  EXPECT_NEAR(r.variance, brute_delong_variance(a, b, l), 1e-12);
  EXPECT_NEAR(r.stat.statistic, (r.auc_a - r.auc_b) / std::sqrt(r.variance), 1e-12);
}

TEST(DeLong, RandomDataMatchesBruteForce) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 6 + rng.below(30);
    std::vector<double> a(n), b(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      l[i] = static_cast<int>(rng.below(2));
      a[i] = std::round((rng.normal() + l[i]) * 4) / 4;
      b[i] = std::round((rng.normal() + 0.5 * l[i]) * 4) / 4;
    }
    l[0] = 0, l[1] = 1, l[2] = 0, l[3] = 1;
    const auto r = delong(a, b, l);
    EXPECT_NEAR(r.auc_a, pairwise_auc(a, l), 1e-12);
    const double var = brute_delong_variance(a, b, l);
    EXPECT_NEAR(r.variance, var, 1e-12);
    if (var > 0) EXPECT_NEAR(r.stat.p_raw, std::erfc(std::abs((r.auc_a - r.auc_b) / std::sqrt(var)) / std::sqrt(2.0)), 1e-12);
  }
}

TEST(DeLong, DegenerateVariance) {
  const std::vector<int> l = {0, 0, 1, 1};
  const std::vector<double> perfect = {0.1, 0.2, 0.8, 0.9}, perfect2 = {0.0, 0.3, 0.5, 0.6}, flat(4, 0.5);
  const auto same = delong(perfect, perfect2, l);
  EXPECT_EQ(same.stat.p_raw, 1.0);
  try {
    delong(perfect, flat, l);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate variance"), std::string::npos);
  }
}

TEST(DeLong, FlattenedMultiClassUsesOneHot) {
  const std::vector<int> labels = {0, 2, 1, 2, 0};
  Rng rng(4);
  std::vector<double> pa(15), pb(15);
  for (auto& v : pa) v = rng.uniform();
  for (auto& v : pb) v = rng.uniform();
  std::vector<int> onehot(15, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) onehot[i * 3 + labels[i]] = 1;
  const auto flat = delong_flattened(pa, pb, labels, 3);
  const auto direct = delong(pa, pb, onehot);
  EXPECT_EQ(flat.stat.p_raw, direct.stat.p_raw);
  EXPECT_EQ(flat.auc_a, direct.auc_a);
  EXPECT_THROW(delong_flattened(pa, pb, std::vector<int>{0, 3, 1, 2, 0}, 3), ValidationError);
}

// ---------------------------------------------------------------------------

TEST(Wilcoxon, HandExamples) {
  const std::vector<double> x = {0.3, 0.5, 0.9};
  EXPECT_EQ(wilcoxon_signed_rank(x, x).p_raw, 1.0);
  const std::vector<double> y = {0.0, 0.0, 0.0};
  const auto r = wilcoxon_signed_rank(std::vector<double>{1, 2, 3}, y);
  EXPECT_EQ(r.statistic, 0.0);
  EXPECT_NEAR(r.p_raw, 0.25, 1e-15);
  const auto tied = wilcoxon_signed_rank(std::vector<double>{1, -1, 2, 3}, std::vector<double>(4, 0.0));
  EXPECT_EQ(tied.statistic, 1.5);
  EXPECT_NEAR(tied.p_raw, 0.375, 1e-15);
  EXPECT_NEAR(tied.p_raw, enumerate_wilcoxon_p({1, -1, 2, 3}), 1e-15);
}

TEST(Wilcoxon, ExactBranchMatchesEnumeration) {
  Rng rng(5);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> d(n);
    for (auto& v : d) v = (static_cast<double>(rng.below(7)) - 3.0) * 0.25;
    if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0; })) d[0] = 0.5;
    EXPECT_NEAR(wilcoxon_signed_rank(d, std::vector<double>(n, 0.0)).p_raw, enumerate_wilcoxon_p(d), 1e-12);
  }
}

TEST(Wilcoxon, NormalApproximationMatchesReference) {
  // References: scipy.stats.wilcoxon(d, method="approx", correction=True).
  std::vector<double> d;
  for (int i = 0; i < 20; ++i) d.push_back(((i * 7) % 11 - 4) * 0.5);
  const auto r = wilcoxon_signed_rank(d, std::vector<double>(d.size(), 0.0));
  EXPECT_EQ(r.statistic, 67.0);
  EXPECT_NEAR(r.p_raw, 0.26669124223129836, 1e-12);
  const std::vector<double> d2 = {0.3, -0.1, 0.25, 0.4, -0.05, 0.12, 0.33, 0.2, 0.15, -0.22, 0.31, 0.07, 0.09, 0.18};
  const auto r2 = wilcoxon_signed_rank(d2, std::vector<double>(d2.size(), 0.0));
  EXPECT_EQ(r2.statistic, 14.0);
  EXPECT_NEAR(r2.p_raw, 0.01705562940659306, 1e-12);
}

// ---------------------------------------------------------------------------

TEST(BhFdr, StepUpExamples) {
  EXPECT_EQ(bh_fdr(std::vector<double>{0.03}), (std::vector<double>{0.03}));
  for (double v : bh_fdr(std::vector<double>{0.01, 0.02, 0.03, 0.04})) EXPECT_NEAR(v, 0.04, 1e-15);
  const auto two = bh_fdr(std::vector<double>{0.005, 0.5});
  EXPECT_NEAR(two[0], 0.01, 1e-15);
  EXPECT_NEAR(two[1], 0.5, 1e-15);
}

TEST(BhFdr, PermutationInvariantAndMonotone) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(12);
    std::vector<double> p(m);
    for (auto& v : p) v = rng.uniform() < 0.2 ? 0.5 : rng.uniform();
    const auto adj = bh_fdr(p);
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<double> pp(m);
    for (std::size_t i = 0; i < m; ++i) pp[i] = p[perm[i]];
    const auto adj_perm = bh_fdr(pp);
    for (std::size_t i = 0; i < m; ++i) EXPECT_EQ(adj_perm[i], adj[perm[i]]);
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    for (std::size_t k = 0; k + 1 < m; ++k) EXPECT_LE(adj[order[k]], adj[order[k + 1]]);
    for (std::size_t i = 0; i < m; ++i) {
      EXPECT_GE(adj[i], p[i]);
      EXPECT_LE(adj[i], 1.0);
    }
  }
}

TEST(BhFdr, ApplyFdrSetsSignificance) {
  std::vector<StatResult> rs(3);
  rs[0].p_raw = 0.01;
  rs[1].p_raw = 0.04;
  rs[2].p_raw = 0.8;
  apply_fdr(rs);
  EXPECT_NEAR(rs[0].p_adjusted, 0.03, 1e-15);
  EXPECT_NEAR(rs[1].p_adjusted, 0.06, 1e-15);
  EXPECT_TRUE(rs[0].significant);
  EXPECT_FALSE(rs[1].significant);
  for (const auto& r : rs) {
    EXPECT_GE(r.p_adjusted, r.p_raw);
    EXPECT_EQ(r.significant, r.p_adjusted < 0.05);
  }
}

// ---------------------------------------------------------------------------

TEST(TiRads, BinarizationThreshold) {
  EXPECT_EQ(binarize_tirads(1), RiskClass::kLow);
  EXPECT_EQ(binarize_tirads(3), RiskClass::kLow);
  EXPECT_EQ(binarize_tirads(4), RiskClass::kHigh);
  EXPECT_EQ(binarize_tirads(5), RiskClass::kHigh);
  EXPECT_THROW(binarize_tirads(0), ValidationError);
  EXPECT_THROW(binarize_tirads(6), ValidationError);
}

TEST(TailProbabilities, ReferenceValues) {
  EXPECT_NEAR(normal_two_sided_p(1.959963984540054), 0.05, 1e-12);
  EXPECT_EQ(normal_two_sided_p(0.0), 1.0);
  EXPECT_NEAR(chi2_1df_sf(3.841458820694124), 0.05, 1e-12);
  EXPECT_EQ(chi2_1df_sf(0.0), 1.0);
}

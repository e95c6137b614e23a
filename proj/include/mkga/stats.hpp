#pragma once

// Evaluation metrics and paired significance tests: Dice/IoU, accuracy/F1,
// midrank AUC, McNemar, DeLong, Wilcoxon signed-rank and Benjamini-Hochberg.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkga/errors.hpp"

namespace mkga {

struct StatResult {
  std::string test_name;
  double statistic = 0.0;
  double p_raw = 1.0;
  double p_adjusted = 1.0;
  bool significant = false;
};

inline constexpr double kSignificanceLevel = 0.05;

/// Two-sided standard normal tail probability.
inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

/// Survival function of chi-square with one degree of freedom.
inline double chi2_1df_sf(double x) { return x <= 0 ? 1.0 : std::erfc(std::sqrt(x / 2.0)); }

// ---------------------------------------------------------------------------
// Metrics

struct Overlap {
  double dice = 0.0;
  double iou = 0.0;
};

/// Dice and IoU of two binary masks; two empty masks score (1, 1).
inline Overlap dice_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice_iou: masks differ in size");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = truth[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(both);
  return {2.0 * inter / static_cast<double>(p + g), inter / static_cast<double>(p + g - both)};
}

struct Classification {
  double accuracy = 0.0;
  double f1 = 0.0;
};

namespace detail {

inline double f1_for(std::span<const int> preds, std::span<const int> trues, int cls) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    tp += preds[i] == cls && trues[i] == cls;
    fp += preds[i] == cls && trues[i] != cls;
    fn += preds[i] != cls && trues[i] == cls;
  }
  const std::size_t d = 2 * tp + fp + fn;
  return d == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(d);
}

inline double accuracy(std::span<const int> preds, std::span<const int> trues) {
  if (preds.empty()) throw ValidationError("accuracy: empty input");
  if (preds.size() != trues.size()) throw ShapeError("accuracy: prediction/label length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == trues[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

}  // namespace detail

/// Accuracy and F1 of `positive_class`: f1 = 2TP / (2TP + FP + FN).
inline Classification accuracy_f1(std::span<const int> preds, std::span<const int> trues, int positive_class = 1) {
  const double acc = detail::accuracy(preds, trues);
  return {acc, detail::f1_for(preds, trues, positive_class)};
}

/// Accuracy and unweighted macro-F1 over classes [0, num_classes); a class
/// without support or predictions contributes F1 = 0.
inline Classification accuracy_macro_f1(std::span<const int> preds, std::span<const int> trues, int num_classes) {
  const double acc = detail::accuracy(preds, trues);
  double f1 = 0.0;
  for (int c = 0; c < num_classes; ++c) f1 += detail::f1_for(preds, trues, c);
  return {acc, f1 / num_classes};
}

/// 1-based midranks (ties share the mean of their positions).
inline std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = mid;
    i = j + 1;
  }
  return r;
}

/// Mann-Whitney AUC with midrank ties: P(pos > neg) + P(pos == neg) / 2.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores/labels length mismatch");
  std::size_t pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValidationError("auc: labels must be 0 or 1");
    pos += l == 1;
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("AUC undefined: labels contain a single class");
  const auto r = midranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (labels[i] == 1) rank_sum += r[i];
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

// ---------------------------------------------------------------------------
// McNemar

/// Two-sided exact binomial p for the smaller discordant count k of n (p=1/2).
inline double binomial_two_sided_p(std::size_t k, std::size_t n) {
  double term = std::pow(0.5, static_cast<double>(n));  // C(n,0) / 2^n
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    tail += term;
    term = term * static_cast<double>(n - i) / static_cast<double>(i + 1);
  }
  return std::min(1.0, 2.0 * tail);
}

/// McNemar test on paired correctness vectors. b = A right & B wrong,
/// c = A wrong & B right. Exact binomial when b + c < exact_below, otherwise
/// continuity-corrected chi-square.
inline StatResult mcnemar(std::span<const std::uint8_t> correct_a, std::span<const std::uint8_t> correct_b,
                          std::size_t exact_below = 25) {
  if (correct_a.size() != correct_b.size()) throw ShapeError("mcnemar: unpaired correctness vectors");
  std::size_t b = 0, c = 0;
  for (std::size_t i = 0; i < correct_a.size(); ++i) {
    b += correct_a[i] && !correct_b[i];
    c += !correct_a[i] && correct_b[i];
  }
  StatResult r;
  r.test_name = "mcnemar";
  const std::size_t n = b + c;
  if (n == 0) {
    r.statistic = 0.0;
    r.p_raw = 1.0;
  } else if (n < exact_below) {
    r.statistic = static_cast<double>(std::min(b, c));
    r.p_raw = binomial_two_sided_p(std::min(b, c), n);
  } else {
    const double diff = std::abs(static_cast<double>(b) - static_cast<double>(c)) - 1.0;
    r.statistic = diff * diff / static_cast<double>(n);
    r.p_raw = chi2_1df_sf(r.statistic);
  }
  r.p_adjusted = r.p_raw;
  r.significant = r.p_adjusted < kSignificanceLevel;
  return r;
}

// ---------------------------------------------------------------------------
// DeLong

struct DelongResult {
  StatResult stat;
  double auc_a = 0.0;
  double auc_b = 0.0;
  double variance = 0.0;
};

namespace detail {

struct Components {
  std::vector<double> v10;  // per positive
  std::vector<double> v01;  // per negative
  double auc = 0.0;
};

// Structural components via midranks: V10_i = (rank_all - rank_pos) / n_neg,
// V01_j = 1 - (rank_all - rank_neg) / n_pos.
inline Components structural_components(std::span<const double> scores, std::span<const int> labels) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(scores[i]);
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  const auto r_all = midranks(all);
  const auto r_pos = midranks(pos);
  const auto r_neg = midranks(neg);
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
  Components c;
  c.v10.resize(pos.size());
  c.v01.resize(neg.size());
  for (std::size_t i = 0; i < pos.size(); ++i) c.v10[i] = (r_all[i] - r_pos[i]) / n;
  for (std::size_t j = 0; j < neg.size(); ++j) c.v01[j] = 1.0 - (r_all[pos.size() + j] - r_neg[j]) / m;
  c.auc = std::accumulate(c.v10.begin(), c.v10.end(), 0.0) / m;
  return c;
}

inline double covariance(const std::vector<double>& x, const std::vector<double>& y) {
  const double k = static_cast<double>(x.size());
  if (x.size() < 2) return 0.0;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / k;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / k;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
  return s / (k - 1.0);
}

}  // namespace detail

/// DeLong test for two correlated AUCs on the same samples.
inline DelongResult delong(std::span<const double> scores_a, std::span<const double> scores_b, std::span<const int> labels) {
  if (scores_a.size() != labels.size() || scores_b.size() != labels.size())
    throw ShapeError("delong: score/label length mismatch");
  // Validates labels and class presence.
  (void)auc(scores_a, labels);
  const auto a = detail::structural_components(scores_a, labels);
  const auto b = detail::structural_components(scores_b, labels);
  const double m = static_cast<double>(a.v10.size()), n = static_cast<double>(a.v01.size());
  const double s10 = detail::covariance(a.v10, a.v10) + detail::covariance(b.v10, b.v10) - 2.0 * detail::covariance(a.v10, b.v10);
  const double s01 = detail::covariance(a.v01, a.v01) + detail::covariance(b.v01, b.v01) - 2.0 * detail::covariance(a.v01, b.v01);
  DelongResult r;
  r.auc_a = a.auc;
  r.auc_b = b.auc;
  r.variance = s10 / m + s01 / n;
  r.stat.test_name = "delong";
  const double delta = a.auc - b.auc;
  if (r.variance <= 0.0) {
    if (delta != 0.0) throw NumericalError("delong: degenerate variance with nonzero AUC difference");
    r.stat.statistic = 0.0;
    r.stat.p_raw = 1.0;
  } else {
    r.stat.statistic = delta / std::sqrt(r.variance);
    r.stat.p_raw = normal_two_sided_p(r.stat.statistic);
  }
  r.stat.p_adjusted = r.stat.p_raw;
  r.stat.significant = r.stat.p_adjusted < kSignificanceLevel;
  return r;
}

/// Multi-class DeLong: one-hot truth and per-class probabilities, both
/// flattened sample-major ([N*K]).
inline DelongResult delong_flattened(std::span<const double> probs_a, std::span<const double> probs_b,
                                     std::span<const int> labels, std::size_t num_classes) {
  if (probs_a.size() != labels.size() * num_classes || probs_b.size() != probs_a.size())
    throw ShapeError("delong_flattened: probability matrix size mismatch");
  std::vector<int> onehot(probs_a.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw ValidationError("delong_flattened: label out of range");
    onehot[i * num_classes + static_cast<std::size_t>(labels[i])] = 1;
  }
  return delong(probs_a, probs_b, onehot);
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank

/// Two-sided Wilcoxon signed-rank test of paired samples. Zero differences
/// are dropped; |d| is midranked; W = min(W+, W-). Exact null distribution
/// for n_eff <= exact_max, else normal approximation with tie-corrected
/// variance and continuity correction.
inline StatResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y, std::size_t exact_max = 12) {
  if (x.size() != y.size()) throw ShapeError("wilcoxon: unpaired samples");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  StatResult r;
  r.test_name = "wilcoxon";
  if (d.empty()) {
    r.statistic = 0.0;
    r.p_raw = 1.0;
    r.p_adjusted = 1.0;
    return r;
  }
  std::vector<double> mag(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) mag[i] = std::abs(d[i]);
  const auto ranks = midranks(mag);
  double w_plus = 0.0, total = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total += ranks[i];
    if (d[i] > 0) w_plus += ranks[i];
  }
  const double w = std::min(w_plus, total - w_plus);
  r.statistic = w;
  const std::size_t n = d.size();

  if (n <= exact_max) {
    // Midranks are multiples of 1/2: count sign patterns over doubled ranks.
    std::vector<std::size_t> twice(n);
    std::size_t sum2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      twice[i] = static_cast<std::size_t>(std::llround(2.0 * ranks[i]));
      sum2 += twice[i];
    }
    std::vector<double> ways(sum2 + 1, 0.0);
    ways[0] = 1.0;
    for (std::size_t v : twice)
      for (std::size_t s = sum2; s + 1 > v; --s) ways[s] += ways[s - v];
    const std::size_t w2 = static_cast<std::size_t>(std::llround(2.0 * w));
    double hits = 0.0;
    for (std::size_t s = 0; s <= sum2; ++s)
      if (std::min(s, sum2 - s) <= w2) hits += ways[s];
    r.p_raw = std::min(1.0, hits / std::pow(2.0, static_cast<double>(n)));
  } else {
    const double nn = static_cast<double>(n);
    double ties = 0.0;
    std::vector<double> sorted(ranks);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size();) {
      std::size_t j = i;
      while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i);
      ties += t * t * t - t;
      i = j;
    }
    const double mean = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - ties / 48.0;
    const double z = var > 0 ? std::max(0.0, std::abs(w_plus - mean) - 0.5) / std::sqrt(var) : 0.0;
    r.p_raw = std::min(1.0, normal_two_sided_p(z));
  }
  r.p_adjusted = r.p_raw;
  r.significant = r.p_adjusted < kSignificanceLevel;
  return r;
}

// ---------------------------------------------------------------------------

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
inline std::vector<double> bh_fdr(std::span<const double> p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> adj(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    // Ratio first: m/(k+1) >= 1, so the product never rounds below p.
    const double v = p[order[k]] * (static_cast<double>(m) / static_cast<double>(k + 1));
    running = std::min(running, v);
    adj[order[k]] = std::min(1.0, running);
  }
  return adj;
}

/// Applies BH jointly to a family of results and sets significance.
inline void apply_fdr(std::vector<StatResult>& results) {
  std::vector<double> raw;
  for (const auto& r : results) raw.push_back(r.p_raw);
  const auto adj = bh_fdr(raw);
  for (std::size_t i = 0; i < results.size(); ++i) {
    results[i].p_adjusted = std::max(adj[i], results[i].p_raw);
    results[i].significant = results[i].p_adjusted < kSignificanceLevel;
  }
}

enum class RiskClass { kLow = 0, kHigh = 1 };

/// TI-RADS 1..3 -> low risk, 4..5 -> high risk.
inline RiskClass binarize_tirads(int score) {
  if (score < 1 || score > 5) throw ValidationError("binarize_tirads: score " + std::to_string(score) + " outside 1..5");
  return score <= 3 ? RiskClass::kLow : RiskClass::kHigh;
}

}  // namespace mkga

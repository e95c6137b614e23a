#pragma once

// Compound segmentation loss (soft Dice + pixel cross-entropy), image-level
// cross-entropy, and the weighted multi-task objective.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/network.hpp"
#include "mkga/ops.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

/// Label value marking an absent annotation.
inline constexpr int kAbsent = -1;

struct LossWeights {
  double lambda_mal = 1.0;
  double lambda_pos = 1.0;
};

struct Targets {
  std::vector<std::uint8_t> masks;  // N*H*W, values in {0,1}
  std::vector<int> malignancy;      // N, {0,1} or kAbsent
  std::vector<int> position;        // N, {0,1,2} or kAbsent
};

/// Soft Dice loss averaged over the batch:
/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
/// `probs` is either the foreground probability [N,H,W] / [N,1,H,W] or a
/// two-class probability map [N,2,H,W] (channel 1 is foreground).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& probs, std::span<const std::uint8_t> target, double eps = 1e-6) {
  if (!(eps > 0)) throw ConfigError("dice_loss: eps must be positive");
  Tensor<T> fg = probs;
  if (probs.rank() == 4 && probs.dim(1) == 2) fg = narrow_channels(probs, 1, 1);
  if (fg.rank() < 2) throw ShapeError("dice_loss: expected a batch of maps, got " + to_string(probs.shape()));
  const std::size_t n = fg.dim(0), per = fg.numel() / n;
  if (target.size() != fg.numel()) {
    throw ShapeError("dice_loss: target has " + std::to_string(target.size()) + " pixels for probabilities " +
                     to_string(probs.shape()));
  }
  for (auto v : target)
    if (v > 1) throw ValidationError("dice_loss: target mask values must be 0 or 1");
  std::vector<double> inter(n), denom(n);
  double total = 0.0;
  const auto& p = fg.storage();
  for (std::size_t i = 0; i < n; ++i) {
    double si = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t k = 0; k < per; ++k) {
      const double pv = p[i * per + k], gv = target[i * per + k];
      si += pv * gv;
      sp += pv;
      sg += gv;
    }
    inter[i] = 2.0 * si + eps;
    denom[i] = sp + sg + eps;
    total += 1.0 - inter[i] / denom[i];
  }
  std::vector<std::uint8_t> g(target.begin(), target.end());
  return make_result<T>(Shape{}, {static_cast<T>(total / static_cast<double>(n))}, {fg},
                        [n, per, inter, denom, g = std::move(g)](Node<T>& self) {
                          auto& gp = self.inputs[0]->grad;
                          const double up = self.grad[0] / static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const double d2 = denom[i] * denom[i];
                            for (std::size_t k = 0; k < per; ++k) {
                              const double dk = -(2.0 * g[i * per + k] * denom[i] - inter[i]) / d2;
                              gp[i * per + k] += static_cast<T>(up * dk);
                            }
                          }
                        });
}

namespace detail {

// Mean negative log-likelihood over labeled positions of logits [N,K,inner];
// labels has N*inner entries in [0,K) or kAbsent.
template <typename T>
Tensor<T> class_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, std::size_t* labeled_out,
                              const char* name) {
  if (logits.rank() < 2) throw ShapeError(std::string(name) + ": logits need a class axis, got " + to_string(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1), inner = logits.numel() / (n * k);
  if (labels.size() != n * inner) {
    throw ShapeError(std::string(name) + ": " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  std::size_t labeled = 0;
  for (int l : labels) {
    if (l == kAbsent) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw ValidationError(std::string(name) + ": label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
    ++labeled;
  }
  if (labeled_out) *labeled_out = labeled;
  if (labeled == 0) return Tensor<T>::scalar(T(0));

  const auto& x = logits.storage();
  std::vector<T> probs(x.size());
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = b * k * inner + i;
      T mx = x[base];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, x[base + c * inner]);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(x[base + c * inner] - mx));
      const double lse = mx + std::log(z);
      for (std::size_t c = 0; c < k; ++c)
        probs[base + c * inner] = static_cast<T>(std::exp(static_cast<double>(x[base + c * inner]) - lse));
      const int l = labels[b * inner + i];
      if (l != kAbsent) total += lse - x[base + static_cast<std::size_t>(l) * inner];
    }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(Shape{}, {static_cast<T>(total / static_cast<double>(labeled))}, {logits},
                        [n, k, inner, labeled, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
                          auto& g = self.inputs[0]->grad;
                          const T up = static_cast<T>(self.grad[0] / static_cast<double>(labeled));
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const int l = lab[b * inner + i];
                              if (l == kAbsent) continue;
                              const std::size_t base = b * k * inner + i;
                              for (std::size_t c = 0; c < k; ++c) {
                                const T onehot = static_cast<int>(c) == l ? T(1) : T(0);
                                g[base + c * inner] += up * (probs[base + c * inner] - onehot);
                              }
                            }
                        });
}

}  // namespace detail

/// Mean pixel-wise cross-entropy of seg logits [N,2,H,W] against a binary mask.
template <typename T>
Tensor<T> pixel_ce(const Tensor<T>& seg_logits, std::span<const std::uint8_t> mask) {
  std::vector<int> labels(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 1) throw ValidationError("pixel_ce: mask values must be 0 or 1");
    labels[i] = mask[i];
  }
  return detail::class_cross_entropy(seg_logits, std::span<const int>(labels), nullptr, "pixel_ce");
}

/// Mean image-level cross-entropy over samples whose label is not kAbsent.
/// Returns a constant 0 when no sample is labeled; `labeled` reports the count.
template <typename T>
Tensor<T> image_ce(const Tensor<T>& logits, std::span<const int> labels, std::size_t* labeled = nullptr) {
  if (logits.rank() != 2) throw ShapeError("image_ce: expected [N,K] logits, got " + to_string(logits.shape()));
  return detail::class_cross_entropy(logits, labels, labeled, "image_ce");
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  Tensor<T> seg;
  Tensor<T> mal;
  Tensor<T> pos;
  bool mal_present = false;
  bool pos_present = false;
};

/// L = L_seg + lambda_mal L_mal + lambda_pos L_pos with L_seg = Dice + pixel CE.
/// Classification terms average over labeled samples; an entirely unlabeled
/// term contributes zero and is reported absent.
template <typename T>
LossBreakdown<T> total_loss(const ModelOutputs<T>& out, const Targets& targets, const LossWeights& w) {
  if (!out.seg_logits.defined() || out.seg_logits.dim(0) == 0) throw UsageError("total_loss: empty batch");
  const std::size_t n = out.seg_logits.dim(0);
  if (targets.malignancy.size() != n || targets.position.size() != n) {
    throw ShapeError("total_loss: label vectors do not match batch size " + std::to_string(n));
  }
  if (w.lambda_mal < 0 || w.lambda_pos < 0) throw ConfigError("total_loss: loss weights must be non-negative");
  LossBreakdown<T> r;
  Tensor<T> probs = softmax(out.seg_logits, 1);
  r.seg = add(dice_loss(probs, targets.masks), pixel_ce(out.seg_logits, targets.masks));
  std::size_t mal_n = 0, pos_n = 0;
  r.mal = image_ce(out.mal_logits, std::span<const int>(targets.malignancy), &mal_n);
  r.pos = image_ce(out.pos_logits, std::span<const int>(targets.position), &pos_n);
  r.mal_present = mal_n > 0;
  r.pos_present = pos_n > 0;
  r.total = r.seg;
  if (r.mal_present) r.total = add(r.total, scale(r.mal, static_cast<T>(w.lambda_mal)));
  if (r.pos_present) r.total = add(r.total, scale(r.pos, static_cast<T>(w.lambda_pos)));
  return r;
}

}  // namespace mkga

#pragma once

// Decoder-side adapters: multi-kernel skip refinement, context-conditioned
// gating, gated fusion (MKGA), the residual SE bottleneck correction
// (ResMKGA), and the supporting ASPP, pseudo-skip pyramid and LoRA blocks.

#include <algorithm>
#include <cstddef>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/module.hpp"
#include "mkga/ops.hpp"
#include "mkga/rng.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

/// Receptive fields of the two parallel refinement branches.
enum class KernelPair {
  kK1_3,  // 1x1 and 3x3
  kK3_5,  // 3x3 and 5x5 (dilated 3x3, d=2)
  kK3_7,  // 3x3 and 7x7 (dilated 3x3, d=3)
};

enum class SkipFusion {
  kPlain,  // upsample, concatenate raw skip, two conv blocks
  kMkga,
};

/// Where the classification heads pool their features.
enum class HeadTap { kBottleneck, kDecoder };

struct AdapterConfig {
  SkipFusion skip_fusion = SkipFusion::kMkga;
  KernelPair kernel_pair = KernelPair::kK3_5;
  /// Realize the large branch of K3_5/K3_7 as a dense 5x5/7x7 kernel instead
  /// of a dilated 3x3.
  bool dense_large_kernel = false;
  bool use_gate = true;
  bool use_multikernel = true;
  bool use_res_mkga = false;
  bool use_se = true;
  std::size_t lora_rank = 0;
  double lora_alpha = 8.0;
  bool freeze_encoder = false;
  /// Decoder widths, coarsest fusion stage first.
  std::vector<std::size_t> decoder_widths = {64, 32, 16};
  std::size_t norm_groups = 8;
  std::size_t se_reduction = 4;
  std::vector<std::size_t> aspp_rates = {1, 2, 4};
  HeadTap head_tap = HeadTap::kBottleneck;
  UpsampleMode upsample_mode = UpsampleMode::kBilinear;

  bool operator==(const AdapterConfig&) const = default;
};

inline std::string to_string(KernelPair k) {
  switch (k) {
    case KernelPair::kK1_3: return "K1_3";
    case KernelPair::kK3_5: return "K3_5";
    case KernelPair::kK3_7: return "K3_7";
  }
  return "?";
}

inline KernelPair parse_kernel_pair(const std::string& s) {
  if (s == "K1_3") return KernelPair::kK1_3;
  if (s == "K3_5") return KernelPair::kK3_5;
  if (s == "K3_7") return KernelPair::kK3_7;
  throw ConfigError("unknown kernel pair '" + s + "' (expected K1_3, K3_5 or K3_7)");
}

/// Intermediate width of the attention gate: half the refined width, floor 8.
inline std::size_t gate_width(std::size_t refined) { return std::max<std::size_t>(refined / 2, 8); }

// ---------------------------------------------------------------------------

/// Parallel convolutions with complementary receptive fields, concatenated and
/// projected by 1x1 conv + norm + ReLU. Spatial size is preserved.
template <typename T>
class MultiKernelRefine : public Module<T> {
 public:
  MultiKernelRefine(std::size_t skip_channels, std::size_t refined_channels, const AdapterConfig& cfg,
                    Rng& rng) {
    if (!cfg.use_multikernel) {
      branch_a_ = &this->register_module("branch_a", Conv2d<T>::same(skip_channels, refined_channels, 3, 1, rng));
    } else {
      std::size_t ka = 3, kb = 3, db = 1;
      switch (cfg.kernel_pair) {
        case KernelPair::kK1_3: ka = 1; kb = 3; db = 1; break;
        case KernelPair::kK3_5: kb = cfg.dense_large_kernel ? 5 : 3; db = cfg.dense_large_kernel ? 1 : 2; break;
        case KernelPair::kK3_7: kb = cfg.dense_large_kernel ? 7 : 3; db = cfg.dense_large_kernel ? 1 : 3; break;
      }
      branch_a_ = &this->register_module("branch_a", Conv2d<T>::same(skip_channels, refined_channels, ka, 1, rng));
      branch_b_ = &this->register_module("branch_b", Conv2d<T>::same(skip_channels, refined_channels, kb, db, rng));
    }
    const std::size_t cat = branch_b_ ? 2 * refined_channels : refined_channels;
    project_ = &this->register_module(
        "project", std::make_unique<ConvNormRelu<T>>(cat, refined_channels, 1, Conv2dOptions{}, cfg.norm_groups, rng));
  }

  Tensor<T> forward(const Tensor<T>& x_skip) const {
    return project_->forward(branches(x_skip));
  }

  /// Concatenated branch outputs before the 1x1 projection.
  Tensor<T> branches(const Tensor<T>& x_skip) const {
    if (!branch_b_) return branch_a_->forward(x_skip);
    return concat_channels<T>({branch_a_->forward(x_skip), branch_b_->forward(x_skip)});
  }

  Conv2d<T>& branch_a() { return *branch_a_; }
  Conv2d<T>* branch_b() { return branch_b_; }
  ConvNormRelu<T>& projection() { return *project_; }

 private:
  Conv2d<T>* branch_a_ = nullptr;
  Conv2d<T>* branch_b_ = nullptr;
  ConvNormRelu<T>* project_ = nullptr;
};

template <typename T>
struct GateTensors {
  Tensor<T> alpha;    // [N,1,H,W], strictly inside (0,1)
  Tensor<T> refined;  // the gate's input skip feature
  Tensor<T> gated;    // alpha * refined, broadcast over channels
};

/// Additive attention gate: alpha = sigmoid(psi(relu(W_g x_high + W_s x_ref))).
template <typename T>
class AttentionGate : public Module<T> {
 public:
  AttentionGate(std::size_t high_channels, std::size_t refined_channels, Rng& rng) {
    const std::size_t inter = gate_width(refined_channels);
    w_high_ = &this->register_module("w_high", std::make_unique<Conv2d<T>>(high_channels, inter, 1, Conv2dOptions{}, rng));
    w_skip_ = &this->register_module("w_skip", std::make_unique<Conv2d<T>>(refined_channels, inter, 1, Conv2dOptions{}, rng));
    psi_ = &this->register_module("psi", std::make_unique<Conv2d<T>>(inter, 1, 1, Conv2dOptions{}, rng));
  }

  GateTensors<T> forward(const Tensor<T>& x_high, const Tensor<T>& x_ref) const {
    if (x_high.rank() != 4 || x_ref.rank() != 4 || x_high.dim(0) != x_ref.dim(0) ||
        x_high.dim(2) != x_ref.dim(2) || x_high.dim(3) != x_ref.dim(3)) {
      throw ShapeError("attention_gate: x_high " + to_string(x_high.shape()) +
                       " is not aligned with x_ref " + to_string(x_ref.shape()) +
                       "; upsample the deeper feature first");
    }
    Tensor<T> alpha = sigmoid(psi_->forward(relu(add(w_high_->forward(x_high), w_skip_->forward(x_ref)))));
    return {alpha, x_ref, mul(alpha, x_ref)};
  }

  Conv2d<T>& w_high() { return *w_high_; }
  Conv2d<T>& w_skip() { return *w_skip_; }
  Conv2d<T>& psi() { return *psi_; }

 private:
  Conv2d<T>* w_high_;
  Conv2d<T>* w_skip_;
  Conv2d<T>* psi_;
};

/// Two sequential 3x3 conv + norm + ReLU blocks.
template <typename T>
class FusionBlock : public Module<T> {
 public:
  FusionBlock(std::size_t in, std::size_t out, std::size_t norm_groups, Rng& rng) {
    first_ = &this->register_module("conv1", std::make_unique<ConvNormRelu<T>>(in, out, 3, Conv2dOptions{1, 1, 1}, norm_groups, rng));
    second_ = &this->register_module("conv2", std::make_unique<ConvNormRelu<T>>(out, out, 3, Conv2dOptions{1, 1, 1}, norm_groups, rng));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return second_->forward(first_->forward(x)); }

 private:
  ConvNormRelu<T>* first_;
  ConvNormRelu<T>* second_;
};

/// Multi-Kernel Gated Adapter: refine -> gate -> concat with x_high -> fuse.
template <typename T>
class MkgaBlock : public Module<T> {
 public:
  MkgaBlock(std::size_t high_channels, std::size_t skip_channels, std::size_t out_channels,
            const AdapterConfig& cfg, Rng& rng)
      : refined_channels_(out_channels) {
    refine_ = &this->register_module("refine", std::make_unique<MultiKernelRefine<T>>(skip_channels, refined_channels_, cfg, rng));
    if (cfg.use_gate)
      gate_ = &this->register_module("gate", std::make_unique<AttentionGate<T>>(high_channels, refined_channels_, rng));
    fuse_ = &this->register_module("fuse", std::make_unique<FusionBlock<T>>(high_channels + refined_channels_, out_channels, cfg.norm_groups, rng));
  }

  Tensor<T> forward(const Tensor<T>& x_high, const Tensor<T>& x_skip) const {
    Tensor<T> refined = refine_->forward(x_skip);
    Tensor<T> skip = gate_ ? gate_->forward(x_high, refined).gated : refined;
    return fuse_->forward(concat_channels<T>({x_high, skip}));
  }

  MultiKernelRefine<T>& refine() { return *refine_; }
  AttentionGate<T>* gate() { return gate_; }
  FusionBlock<T>& fuse() { return *fuse_; }

 private:
  std::size_t refined_channels_;
  MultiKernelRefine<T>* refine_;
  AttentionGate<T>* gate_ = nullptr;
  FusionBlock<T>* fuse_;
};

/// Baseline skip fusion: concat(x_high, x_skip) -> two conv blocks.
template <typename T>
class PlainFuse : public Module<T> {
 public:
  PlainFuse(std::size_t high_channels, std::size_t skip_channels, std::size_t out_channels,
            std::size_t norm_groups, Rng& rng) {
    fuse_ = &this->register_module("fuse", std::make_unique<FusionBlock<T>>(high_channels + skip_channels, out_channels, norm_groups, rng));
  }

  Tensor<T> forward(const Tensor<T>& x_high, const Tensor<T>& x_skip) const {
    return fuse_->forward(concat_channels<T>({x_high, x_skip}));
  }

 private:
  FusionBlock<T>* fuse_;
};

// ---------------------------------------------------------------------------

/// Squeeze-and-excitation: global pool -> C/r -> ReLU -> C -> sigmoid -> channel scale.
template <typename T>
class SeBlock : public Module<T> {
 public:
  SeBlock(std::size_t channels, std::size_t reduction, Rng& rng) {
    if (reduction == 0 || channels < reduction) {
      throw ConfigError("se_block: " + std::to_string(channels) + " channels < reduction " +
                        std::to_string(reduction));
    }
    squeeze_ = &this->register_module("fc1", std::make_unique<Linear<T>>(channels, channels / reduction, rng));
    excite_ = &this->register_module("fc2", std::make_unique<Linear<T>>(channels / reduction, channels, rng));
  }

  /// Per-channel scales [N,C] in (0,1).
  Tensor<T> scales(const Tensor<T>& x) const {
    return sigmoid(excite_->forward(relu(squeeze_->forward(global_avg_pool(x)))));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> s = scales(x);
    return mul(x, reshape(s, {x.dim(0), x.dim(1), 1, 1}));
  }

  Linear<T>& fc1() { return *squeeze_; }
  Linear<T>& fc2() { return *excite_; }

 private:
  Linear<T>* squeeze_;
  Linear<T>* excite_;
};

/// Bottleneck correction: f + SE(phi_3x3(f)); without SE: f + phi_3x3(f).
template <typename T>
class ResMkga : public Module<T> {
 public:
  ResMkga(std::size_t channels, const AdapterConfig& cfg, Rng& rng) {
    phi_ = &this->register_module("phi", Conv2d<T>::same(channels, channels, 3, 1, rng));
    if (cfg.use_se) se_ = &this->register_module("se", std::make_unique<SeBlock<T>>(channels, cfg.se_reduction, rng));
  }

  Tensor<T> correction(const Tensor<T>& f_enc) const {
    Tensor<T> projected = phi_->forward(f_enc);
    return se_ ? se_->forward(projected) : projected;
  }

  Tensor<T> forward(const Tensor<T>& f_enc) const { return add(f_enc, correction(f_enc)); }

  Conv2d<T>& phi() { return *phi_; }
  SeBlock<T>* se() { return se_; }

 private:
  Conv2d<T>* phi_;
  SeBlock<T>* se_ = nullptr;
};

// ---------------------------------------------------------------------------

/// Atrous spatial pyramid pooling: 1x1 branch, one dilated 3x3 per rate and a
/// global-pool branch, concatenated and projected.
template <typename T>
class Aspp : public Module<T> {
 public:
  Aspp(std::size_t in, const std::vector<std::size_t>& rates, std::size_t out, std::size_t norm_groups,
       Rng& rng) {
    if (rates.empty()) throw ConfigError("aspp: at least one rate is required");
    if (std::set<std::size_t>(rates.begin(), rates.end()).size() != rates.size())
      throw ConfigError("aspp: rates must be distinct");
    if (*std::min_element(rates.begin(), rates.end()) < 1) throw ConfigError("aspp: rates must be >= 1");
    pointwise_ = &this->register_module("b0", std::make_unique<ConvNormRelu<T>>(in, out, 1, Conv2dOptions{}, norm_groups, rng));
    for (std::size_t i = 0; i < rates.size(); ++i) {
      atrous_.push_back(&this->register_module(
          "b" + std::to_string(i + 1),
          std::make_unique<ConvNormRelu<T>>(in, out, 3, Conv2dOptions{1, rates[i], rates[i]}, norm_groups, rng)));
    }
    pool_ = &this->register_module("pool", std::make_unique<Conv2d<T>>(in, out, 1, Conv2dOptions{}, rng));
    project_ = &this->register_module(
        "project", std::make_unique<ConvNormRelu<T>>(out * (rates.size() + 2), out, 1, Conv2dOptions{}, norm_groups, rng));
  }

  /// Branch outputs in order [1x1, rate_0 ... rate_k, pool]; raw conv outputs
  /// (pre-norm) when `pre_norm` is set.
  std::vector<Tensor<T>> branches(const Tensor<T>& x, bool pre_norm = false) const {
    std::vector<Tensor<T>> out;
    auto run = [&](ConvNormRelu<T>* b) { return pre_norm ? b->conv().forward(x) : b->forward(x); };
    out.push_back(run(pointwise_));
    for (auto* b : atrous_) out.push_back(run(b));
    Tensor<T> pooled = reshape(global_avg_pool(x), {x.dim(0), x.dim(1), 1, 1});
    Tensor<T> g = pool_->forward(pooled);
    if (!pre_norm) g = relu(g);
    out.push_back(expand(g, {x.dim(0), g.dim(1), x.dim(2), x.dim(3)}));
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return project_->forward(concat_channels(branches(x))); }

 private:
  ConvNormRelu<T>* pointwise_;
  std::vector<ConvNormRelu<T>*> atrous_;
  Conv2d<T>* pool_;
  ConvNormRelu<T>* project_;
};

/// Learnable x2 upsampling (transposed 2x2/stride-2 conv expressed as a 1x1
/// conv to 4C channels followed by a pixel shuffle).
template <typename T>
class LearnableUpsample2x : public Module<T> {
 public:
  LearnableUpsample2x(std::size_t channels, Rng& rng) : channels_(channels) {
    expand_ = &this->register_module("expand", std::make_unique<Conv2d<T>>(channels, 4 * channels, 1, Conv2dOptions{}, rng));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    Tensor<T> y = reshape(expand_->forward(x), {n, channels_, 2, 2, h, w});
    return reshape(permute(y, {0, 1, 4, 2, 5, 3}), {n, channels_, 2 * h, 2 * w});
  }

 private:
  std::size_t channels_;
  Conv2d<T>* expand_;
};

/// Turns a single-scale latent into aligned multi-scale pseudo-skips. Level i
/// sits at upsampling factor factors[i] relative to the latent; each level is
/// derived from the previous one by learnable x2 steps and a 1x1 projection.
template <typename T>
class PseudoSkipPyramid : public Module<T> {
 public:
  /// `factors` ascending powers of two in {1,2,4}; `widths` per level.
  PseudoSkipPyramid(std::size_t latent_channels, std::vector<std::size_t> factors,
                    std::vector<std::size_t> widths, std::size_t norm_groups, Rng& rng)
      : factors_(std::move(factors)) {
    if (factors_.empty() || factors_.size() != widths.size())
      throw ConfigError("pseudo_skip_pyramid: need one width per target scale");
    std::size_t prev_factor = 1, prev_channels = latent_channels;
    for (std::size_t i = 0; i < factors_.size(); ++i) {
      const std::size_t f = factors_[i];
      if (f > 4) {
        throw ConfigError("pseudo_skip_pyramid: requested scale x" + std::to_string(f) +
                          " is finer than x4 of the latent");
      }
      if (f == 0 || (f & (f - 1)) != 0 || f < prev_factor || (i > 0 && f == prev_factor))
        throw ConfigError("pseudo_skip_pyramid: scales must be strictly increasing powers of two");
      Level level;
      for (std::size_t s = prev_factor; s < f; s *= 2) {
        level.ups.push_back(&this->register_module(
            "level" + std::to_string(i) + ".up" + std::to_string(level.ups.size()),
            std::make_unique<LearnableUpsample2x<T>>(prev_channels, rng)));
      }
      level.project = &this->register_module(
          "level" + std::to_string(i) + ".project",
          std::make_unique<ConvNormRelu<T>>(prev_channels, widths[i], 1, Conv2dOptions{}, norm_groups, rng));
      levels_.push_back(level);
      prev_factor = f;
      prev_channels = widths[i];
    }
  }

  /// Pyramid outputs ordered coarsest (latent resolution) first.
  std::vector<Tensor<T>> forward(const Tensor<T>& latent) const {
    std::vector<Tensor<T>> out;
    Tensor<T> cur = latent;
    for (const auto& level : levels_) {
      for (auto* up : level.ups) cur = up->forward(cur);
      cur = level.project->forward(cur);
      out.push_back(cur);
    }
    return out;
  }

  const std::vector<std::size_t>& factors() const { return factors_; }

 private:
  struct Level {
    std::vector<LearnableUpsample2x<T>*> ups;
    ConvNormRelu<T>* project = nullptr;
  };
  std::vector<std::size_t> factors_;
  std::vector<Level> levels_;
};

// ---------------------------------------------------------------------------

/// base(x) + (alpha / rank) * B(A(x)) with A [rank, in], B [out, rank].
template <typename T>
Tensor<T> lora_linear(const Tensor<T>& x, const Tensor<T>& base_weight, const Tensor<T>& base_bias,
                      const Tensor<T>& a, const Tensor<T>& b, double alpha) {
  if (a.rank() != 2 || a.dim(0) == 0) throw ConfigError("lora_linear: rank must be positive");
  const std::size_t r = a.dim(0);
  if (b.rank() != 2 || b.dim(1) != r || b.dim(0) != base_weight.dim(0) || a.dim(1) != base_weight.dim(1)) {
    throw ShapeError("lora_linear: factors A " + to_string(a.shape()) + ", B " + to_string(b.shape()) +
                     " incompatible with base " + to_string(base_weight.shape()));
  }
  const T scaling = static_cast<T>(alpha / static_cast<double>(r));
  return add(linear(x, base_weight, base_bias), scale(linear(linear(x, a), b), scaling));
}

/// Linear layer with a frozen base and trainable low-rank update.
template <typename T>
class LoraLinear : public Module<T> {
 public:
  LoraLinear(std::size_t in, std::size_t out, std::size_t rank, double alpha, Rng& rng) : alpha_(alpha) {
    if (rank == 0) throw ConfigError("lora_linear: rank must be positive; use a plain frozen linear instead");
    base_ = &this->register_module("base", std::make_unique<Linear<T>>(in, out, rng));
    base_->set_trainable(false);
    Tensor<T> a({rank, in});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : a.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    a_ = &this->register_parameter("lora_A", std::move(a));
    b_ = &this->register_parameter("lora_B", Tensor<T>::zeros({out, rank}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return lora_linear(x, base_->weight().tensor, base_->bias().tensor, a_->tensor, b_->tensor, alpha_);
  }

  std::size_t rank() const { return a_->tensor.dim(0); }
  double alpha() const { return alpha_; }
  Linear<T>& base() { return *base_; }
  Parameter<T>& lora_a() { return *a_; }
  Parameter<T>& lora_b() { return *b_; }

 private:
  double alpha_;
  Linear<T>* base_;
  Parameter<T>* a_;
  Parameter<T>* b_;
};

}  // namespace mkga

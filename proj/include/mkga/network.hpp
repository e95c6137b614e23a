#pragma once

// The unified three-head model: a shared backbone (TinyCNN or TinyViT), an
// ASPP or pseudo-skip-pyramid bridge, an optional ResMKGA bottleneck
// correction, a skip-fusion decoder and segmentation/malignancy/position heads.

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mkga/adapters.hpp"
#include "mkga/errors.hpp"
#include "mkga/module.hpp"
#include "mkga/ops.hpp"
#include "mkga/rng.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

enum class BackboneKind { kTinyCnn, kTinyVit };

struct Backbone {
  BackboneKind kind = BackboneKind::kTinyCnn;
  /// TinyCNN stage widths (strides 2, 4, 8, 16).
  std::vector<std::size_t> stage_channels = {16, 32, 64, 128};
  /// TinyViT token width; must divide by the head count.
  std::size_t vit_embed_dim = 64;
  bool freeze = false;
};

inline std::string to_string(BackboneKind k) { return k == BackboneKind::kTinyCnn ? "tiny_cnn" : "tiny_vit"; }

inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "tiny_cnn" || s == "TinyCNN") return BackboneKind::kTinyCnn;
  if (s == "tiny_vit" || s == "TinyViT") return BackboneKind::kTinyVit;
  throw ConfigError("unknown backbone '" + s + "' (expected tiny_cnn or tiny_vit)");
}

enum class Regime { kFrozen, kUnfrozen, kLora };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::kFrozen: return "frozen";
    case Regime::kUnfrozen: return "unfrozen";
    case Regime::kLora: return "lora";
  }
  return "?";
}

template <typename T>
struct ModelOutputs {
  Tensor<T> seg_logits;  // [N,2,H,W]
  Tensor<T> mal_logits;  // [N,2]
  Tensor<T> pos_logits;  // [N,3]
};

/// Geometry of the desk-scale TinyViT.
struct VitGeometry {
  std::size_t patch = 8;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
};

// ---------------------------------------------------------------------------

template <typename T>
class TinyCnnEncoder : public Module<T> {
 public:
  TinyCnnEncoder(const std::vector<std::size_t>& widths, std::size_t norm_groups, Rng& rng) {
    if (widths.size() != 4) throw ConfigError("tiny_cnn: exactly four stage widths are required");
    std::size_t in = 1;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::string s = "stage" + std::to_string(i + 1);
      down_.push_back(&this->register_module(
          s + ".down", std::make_unique<ConvNormRelu<T>>(in, widths[i], 3, Conv2dOptions{2, 1, 1}, norm_groups, rng)));
      refine_.push_back(&this->register_module(
          s + ".conv", std::make_unique<ConvNormRelu<T>>(widths[i], widths[i], 3, Conv2dOptions{1, 1, 1}, norm_groups, rng)));
      in = widths[i];
    }
  }

  /// Features at strides 2, 4, 8, 16.
  std::vector<Tensor<T>> forward(const Tensor<T>& images) const {
    std::vector<Tensor<T>> feats;
    Tensor<T> x = images;
    for (std::size_t i = 0; i < down_.size(); ++i) {
      x = refine_[i]->forward(down_[i]->forward(x));
      feats.push_back(x);
    }
    return feats;
  }

 private:
  std::vector<ConvNormRelu<T>*> down_;
  std::vector<ConvNormRelu<T>*> refine_;
};

/// Attention projection that is either a plain linear or a LoRA-wrapped one.
template <typename T>
class Projection : public Module<T> {
 public:
  Projection(std::size_t width, std::size_t lora_rank, double lora_alpha, Rng& rng) {
    if (lora_rank > 0)
      lora_ = &this->register_module("lora", std::make_unique<LoraLinear<T>>(width, width, lora_rank, lora_alpha, rng));
    else
      plain_ = &this->register_module("linear", std::make_unique<Linear<T>>(width, width, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return lora_ ? lora_->forward(x) : plain_->forward(x); }

  LoraLinear<T>* lora() { return lora_; }

 private:
  LoraLinear<T>* lora_ = nullptr;
  Linear<T>* plain_ = nullptr;
};

template <typename T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(std::size_t width, const VitGeometry& geo, std::size_t lora_rank, double lora_alpha, Rng& rng)
      : heads_(geo.heads) {
    norm1_ = &this->register_module("norm1", std::make_unique<LayerNorm<T>>(width));
    q_ = &this->register_module("attn.q", std::make_unique<Projection<T>>(width, lora_rank, lora_alpha, rng));
    k_ = &this->register_module("attn.k", std::make_unique<Projection<T>>(width, lora_rank, lora_alpha, rng));
    v_ = &this->register_module("attn.v", std::make_unique<Projection<T>>(width, lora_rank, lora_alpha, rng));
    o_ = &this->register_module("attn.o", std::make_unique<Projection<T>>(width, lora_rank, lora_alpha, rng));
    norm2_ = &this->register_module("norm2", std::make_unique<LayerNorm<T>>(width));
    fc1_ = &this->register_module("mlp.fc1", std::make_unique<Linear<T>>(width, width * geo.mlp_ratio, rng));
    fc2_ = &this->register_module("mlp.fc2", std::make_unique<Linear<T>>(width * geo.mlp_ratio, width, rng));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = add(x, multi_head_attention(norm1_->forward(x), heads_, *q_, *k_, *v_, *o_));
    return add(h, fc2_->forward(relu(fc1_->forward(norm2_->forward(h)))));
  }

 private:
  std::size_t heads_;
  LayerNorm<T>* norm1_;
  Projection<T>*q_, *k_, *v_, *o_;
  LayerNorm<T>* norm2_;
  Linear<T>* fc1_;
  Linear<T>* fc2_;
};

/// Patch embedding + transformer blocks + stride-2 neck; emits one latent map
/// at stride 2 * patch.
template <typename T>
class TinyVitEncoder : public Module<T> {
 public:
  TinyVitEncoder(std::size_t width, std::size_t image_size, const VitGeometry& geo, const AdapterConfig& cfg, Rng& rng)
      : width_(width), grid_(image_size / geo.patch) {
    if (image_size % (2 * geo.patch) != 0) throw ConfigError("tiny_vit: image size must be a multiple of 2*patch");
    patch_ = &this->register_module("patch_embed", std::make_unique<Conv2d<T>>(1, width, geo.patch, Conv2dOptions{geo.patch, 0, 1}, rng));
    Tensor<T> pos({1, grid_ * grid_, width});
    for (auto& v : pos.storage()) v = static_cast<T>(rng.normal(0.0, 0.02));
    pos_ = &this->register_parameter("pos_embed", std::move(pos));
    for (std::size_t i = 0; i < geo.blocks; ++i) {
      blocks_.push_back(&this->register_module("blocks." + std::to_string(i),
                                               std::make_unique<TransformerBlock<T>>(width, geo, cfg.lora_rank, cfg.lora_alpha, rng)));
    }
    norm_ = &this->register_module("norm", std::make_unique<LayerNorm<T>>(width));
    neck_ = &this->register_module("neck", std::make_unique<ConvNormRelu<T>>(width, width, 3, Conv2dOptions{2, 1, 1}, cfg.norm_groups, rng));
  }

  Tensor<T> forward(const Tensor<T>& images) const {
    const std::size_t n = images.dim(0);
    Tensor<T> fmap = patch_->forward(images);  // [N,D,g,g]
    if (fmap.dim(2) != grid_ || fmap.dim(3) != grid_) {
      throw ShapeError("tiny_vit: built for a " + std::to_string(grid_) + "x" + std::to_string(grid_) +
                       " patch grid, input " + to_string(images.shape()) + " gives " + to_string(fmap.shape()));
    }
    Tensor<T> tokens = permute(reshape(fmap, {n, width_, grid_ * grid_}), {0, 2, 1});
    tokens = add(tokens, pos_->tensor);
    for (auto* b : blocks_) tokens = b->forward(tokens);
    tokens = norm_->forward(tokens);
    Tensor<T> grid = reshape(permute(tokens, {0, 2, 1}), {n, width_, grid_, grid_});
    return neck_->forward(grid);
  }

 private:
  std::size_t width_, grid_;
  Conv2d<T>* patch_;
  Parameter<T>* pos_;
  std::vector<TransformerBlock<T>*> blocks_;
  LayerNorm<T>* norm_;
  ConvNormRelu<T>* neck_;
};

// ---------------------------------------------------------------------------

/// Skip-fusion decoder. Stages run coarsest first; the deeper feature is
/// upsampled to each skip's resolution before fusion.
template <typename T>
class Decoder : public Module<T> {
 public:
  Decoder(std::size_t bottleneck_channels, const std::vector<std::size_t>& skip_channels, const AdapterConfig& cfg, Rng& rng)
      : mode_(cfg.upsample_mode) {
    if (skip_channels.size() != cfg.decoder_widths.size()) {
      throw ConfigError("decoder: " + std::to_string(cfg.decoder_widths.size()) + " widths for " +
                        std::to_string(skip_channels.size()) + " skip features");
    }
    std::size_t high = bottleneck_channels;
    for (std::size_t i = 0; i < skip_channels.size(); ++i) {
      const std::string name = "stage" + std::to_string(i);
      const std::size_t out = cfg.decoder_widths[i];
      if (cfg.skip_fusion == SkipFusion::kMkga)
        mkga_.push_back(&this->register_module(name, std::make_unique<MkgaBlock<T>>(high, skip_channels[i], out, cfg, rng)));
      else
        plain_.push_back(&this->register_module(name, std::make_unique<PlainFuse<T>>(high, skip_channels[i], out, cfg.norm_groups, rng)));
      high = out;
    }
    out_channels_ = high;
  }

  /// `skips` ordered coarsest first.
  Tensor<T> forward(const Tensor<T>& bottleneck, const std::vector<Tensor<T>>& skips) const {
    Tensor<T> x = bottleneck;
    for (std::size_t i = 0; i < skips.size(); ++i) {
      const std::size_t factor = skips[i].dim(2) / x.dim(2);
      if (factor * x.dim(2) != skips[i].dim(2)) {
        throw ShapeError("decoder: skip " + to_string(skips[i].shape()) + " is not an integer upsampling of " +
                         to_string(x.shape()));
      }
      Tensor<T> high = upsample(x, factor, mode_);
      x = mkga_.empty() ? plain_[i]->forward(high, skips[i]) : mkga_[i]->forward(high, skips[i]);
    }
    return x;
  }

  std::size_t out_channels() const { return out_channels_; }
  MkgaBlock<T>* mkga_stage(std::size_t i) { return i < mkga_.size() ? mkga_[i] : nullptr; }

 private:
  UpsampleMode mode_;
  std::vector<MkgaBlock<T>*> mkga_;
  std::vector<PlainFuse<T>*> plain_;
  std::size_t out_channels_ = 0;
};

// ---------------------------------------------------------------------------

template <typename T>
class Model : public Module<T> {
 public:
  Model(const Backbone& backbone, const AdapterConfig& cfg, std::uint64_t seed, std::size_t image_size)
      : backbone_(backbone), cfg_(cfg), image_size_(image_size) {
    validate(backbone, cfg, image_size);
    Rng rng(seed);
    const auto& widths = backbone.stage_channels;
    std::size_t bottleneck = 0;
    std::vector<std::size_t> skip_channels;
    if (backbone.kind == BackboneKind::kTinyCnn) {
      cnn_ = &this->register_module("encoder", std::make_unique<TinyCnnEncoder<T>>(widths, cfg.norm_groups, rng));
      bottleneck = widths[3];
      aspp_ = &this->register_module("bottleneck.aspp", std::make_unique<Aspp<T>>(bottleneck, cfg.aspp_rates, bottleneck, cfg.norm_groups, rng));
      skip_channels = {widths[2], widths[1], widths[0]};
    } else {
      bottleneck = backbone.vit_embed_dim;
      vit_ = &this->register_module("encoder", std::make_unique<TinyVitEncoder<T>>(bottleneck, image_size, VitGeometry{}, cfg, rng));
      pyramid_ = &this->register_module(
          "pyramid", std::make_unique<PseudoSkipPyramid<T>>(bottleneck, std::vector<std::size_t>{1, 2, 4}, cfg.decoder_widths, cfg.norm_groups, rng));
      skip_channels = cfg.decoder_widths;
    }
    if (cfg.use_res_mkga) res_ = &this->register_module("bottleneck.res_mkga", std::make_unique<ResMkga<T>>(bottleneck, cfg, rng));
    decoder_ = &this->register_module("decoder", std::make_unique<Decoder<T>>(bottleneck, skip_channels, cfg, rng));
    seg_head_ = &this->register_module("heads.seg", std::make_unique<Conv2d<T>>(decoder_->out_channels(), 2, 1, Conv2dOptions{}, rng));
    const std::size_t pooled = cfg.head_tap == HeadTap::kBottleneck ? bottleneck : decoder_->out_channels();
    mal_head_ = &this->register_module("heads.mal", std::make_unique<Linear<T>>(pooled, 2, rng));
    pos_head_ = &this->register_module("heads.pos", std::make_unique<Linear<T>>(pooled, 3, rng));
    apply_regime(default_regime());
  }

  static void validate(const Backbone& backbone, const AdapterConfig& cfg, std::size_t image_size) {
    std::vector<std::string> conflicts;
    if (image_size == 0 || image_size % 16 != 0) conflicts.push_back("image size must be a positive multiple of 16");
    if (cfg.decoder_widths.size() != 3) conflicts.push_back("decoder_widths needs exactly three entries");
    if (backbone.kind == BackboneKind::kTinyCnn) {
      if (backbone.stage_channels.size() != 4) conflicts.push_back("tiny_cnn needs four stage widths");
      if (cfg.lora_rank > 0) conflicts.push_back("lora_rank > 0 applies to tiny_vit attention only, not tiny_cnn");
      if (cfg.aspp_rates.empty()) conflicts.push_back("tiny_cnn bottleneck needs at least one ASPP rate");
    } else {
      if (backbone.vit_embed_dim == 0 || backbone.vit_embed_dim % VitGeometry{}.heads != 0)
        conflicts.push_back("tiny_vit embedding width must be a positive multiple of " + std::to_string(VitGeometry{}.heads));
      if (cfg.lora_rank > 0 && (cfg.freeze_encoder || backbone.freeze))
        conflicts.push_back("freeze_encoder conflicts with lora_rank > 0 (LoRA factors live in the encoder)");
    }
    if (!conflicts.empty()) {
      std::string msg = "inconsistent model configuration:";
      for (const auto& c : conflicts) msg += "\n  - " + c;
      throw ConfigError(msg);
    }
  }

  ModelOutputs<T> forward(const Tensor<T>& images) const {
    auto [bottleneck, skips] = encode(images);
    return heads(bottleneck, skips, images.dim(2));
  }

  /// Shared trunk: (enhanced) bottleneck and skip features, coarsest first.
  std::pair<Tensor<T>, std::vector<Tensor<T>>> encode(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != images.dim(3) || images.dim(2) % 16 != 0) {
      throw ShapeError("model: expected [N,1,H,H] grayscale input with H a multiple of 16, got " + to_string(images.shape()));
    }
    Tensor<T> bottleneck;
    std::vector<Tensor<T>> skips;
    if (cnn_) {
      auto feats = cnn_->forward(images);
      bottleneck = aspp_->forward(feats[3]);
      skips = {feats[2], feats[1], feats[0]};
    } else {
      Tensor<T> latent = vit_->forward(images);
      skips = pyramid_->forward(latent);
      bottleneck = latent;
    }
    if (res_) bottleneck = res_->forward(bottleneck);
    return {bottleneck, skips};
  }

  /// Decoder and heads from a given bottleneck; exposed for connectivity probes.
  ModelOutputs<T> heads(const Tensor<T>& bottleneck, const std::vector<Tensor<T>>& skips, std::size_t image_size) const {
    Tensor<T> dec = decoder_->forward(bottleneck, skips);
    Tensor<T> seg = seg_head_->forward(dec);
    seg = upsample(seg, image_size / seg.dim(2), cfg_.upsample_mode);
    Tensor<T> pooled = global_avg_pool(cfg_.head_tap == HeadTap::kBottleneck ? bottleneck : dec);
    return {seg, mal_head_->forward(pooled), pos_head_->forward(pooled)};
  }

  Regime default_regime() const {
    if (cfg_.lora_rank > 0) return Regime::kLora;
    if (cfg_.freeze_encoder || backbone_.freeze) return Regime::kFrozen;
    return Regime::kUnfrozen;
  }

  /// Sets every parameter's trainable flag according to `regime`.
  void apply_regime(Regime regime) {
    check_regime(regime);
    for (auto* p : this->parameters()) p->trainable = in_regime(p->name, regime);
  }

  void check_regime(Regime regime) const {
    if (regime != Regime::kLora) return;
    if (backbone_.kind == BackboneKind::kTinyCnn)
      throw ConfigError("lora regime is only defined for tiny_vit (LoRA wraps attention projections)");
    if (cfg_.lora_rank == 0) throw ConfigError("lora regime requested but the model was built with lora_rank = 0");
  }

  static bool in_regime(const std::string& name, Regime regime) {
    const bool encoder = name.rfind("encoder.", 0) == 0;
    switch (regime) {
      case Regime::kUnfrozen: return true;
      case Regime::kFrozen: return !encoder;
      case Regime::kLora: return !encoder || name.find(".lora_") != std::string::npos;
    }
    return true;
  }

  const Backbone& backbone() const { return backbone_; }
  const AdapterConfig& config() const { return cfg_; }
  std::size_t image_size() const { return image_size_; }
  Decoder<T>& decoder() { return *decoder_; }
  ResMkga<T>* res_mkga() { return res_; }

 private:
  Backbone backbone_;
  AdapterConfig cfg_;
  std::size_t image_size_;
  TinyCnnEncoder<T>* cnn_ = nullptr;
  Aspp<T>* aspp_ = nullptr;
  TinyVitEncoder<T>* vit_ = nullptr;
  PseudoSkipPyramid<T>* pyramid_ = nullptr;
  ResMkga<T>* res_ = nullptr;
  Decoder<T>* decoder_ = nullptr;
  Conv2d<T>* seg_head_ = nullptr;
  Linear<T>* mal_head_ = nullptr;
  Linear<T>* pos_head_ = nullptr;
};

template <typename T>
std::unique_ptr<Model<T>> build_model(const Backbone& backbone, const AdapterConfig& cfg, std::uint64_t seed = 0,
                                      std::size_t image_size = 64) {
  return std::make_unique<Model<T>>(backbone, cfg, seed, image_size);
}

/// Parameters trained under `regime` (independent of the current flags).
template <typename T>
std::vector<Parameter<T>*> trainable_parameters(Model<T>& model, Regime regime) {
  model.check_regime(regime);
  std::vector<Parameter<T>*> out;
  for (auto* p : model.parameters())
    if (Model<T>::in_regime(p->name, regime)) out.push_back(p);
  return out;
}

/// Parameters currently flagged trainable.
template <typename T>
std::vector<Parameter<T>*> trainable_parameters(Model<T>& model) {
  std::vector<Parameter<T>*> out;
  for (auto* p : model.parameters())
    if (p->trainable) out.push_back(p);
  return out;
}

}  // namespace mkga

#pragma once

// Parameter containers and the basic layers (conv, linear, norms) the
// adapters and networks are composed of.

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/ops.hpp"
#include "mkga/rng.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

template <typename T>
struct Parameter {
  /// Hierarchical dotted name, e.g. "decoder.stage0.gate.psi.weight".
  std::string name;
  Tensor<T> tensor;
  /// False when the owning stage is frozen; optimizer and PCGrad skip it.
  bool trainable = true;
};

/// Tree of named parameters and child modules. Non-copyable: parameters are
/// shared tensor handles, so a copy would alias the weights.
template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  /// All parameters in registration order; names are refreshed to full paths.
  std::vector<Parameter<T>*> parameters(const std::string& prefix = "") {
    std::vector<Parameter<T>*> out;
    collect(prefix, out);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->tensor.numel();
    return n;
  }

  void set_trainable(bool trainable) {
    for (auto* p : parameters()) p->trainable = trainable;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->tensor.zero_grad();
  }

 protected:
  Parameter<T>& register_parameter(std::string name, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->tensor = std::move(tensor);
    params_.emplace_back(std::move(name), std::move(p));
    return *params_.back().second;
  }

  template <typename M>
  M& register_module(std::string name, std::unique_ptr<M> module) {
    M& ref = *module;
    children_.emplace_back(std::move(name), std::move(module));
    return ref;
  }

 private:
  void collect(const std::string& prefix, std::vector<Parameter<T>*>& out) {
    for (auto& [local, p] : params_) {
      p->name = prefix + local;
      out.push_back(p.get());
    }
    for (auto& [local, child] : children_) child->collect(prefix + local + ".", out);
  }

  std::vector<std::pair<std::string, std::unique_ptr<Parameter<T>>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Module<T>>>> children_;
};

/// Kaiming-uniform fill for ReLU fan-in: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

/// Largest group count <= max_groups dividing `channels`.
inline std::size_t resolve_groups(std::size_t channels, std::size_t max_groups) {
  std::size_t g = std::min(channels, std::max<std::size_t>(max_groups, 1));
  while (g > 1 && channels % g != 0) --g;
  return g;
}

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt, Rng& rng,
         bool bias = true)
      : opt_(opt) {
    weight_ = &this->register_parameter(
        "weight", kaiming_uniform<T>({out, in, kernel, kernel}, in * kernel * kernel, rng));
    if (bias) bias_ = &this->register_parameter("bias", Tensor<T>::zeros({out}));
  }

  /// Same-padded stride-1 convolution.
  static std::unique_ptr<Conv2d> same(std::size_t in, std::size_t out, std::size_t kernel,
                                      std::size_t dilation, Rng& rng) {
    return std::make_unique<Conv2d>(in, out, kernel,
                                    Conv2dOptions{1, dilation * (kernel - 1) / 2, dilation}, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d(x, weight_->tensor, bias_ ? bias_->tensor : Tensor<T>{}, opt_);
  }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>& bias() { return *bias_; }
  const Conv2dOptions& options() const { return opt_; }

 private:
  Conv2dOptions opt_;
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) {
    weight_ = &this->register_parameter("weight", kaiming_uniform<T>({out, in}, in, rng));
    if (bias) bias_ = &this->register_parameter("bias", Tensor<T>::zeros({out}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(x, weight_->tensor, bias_ ? bias_->tensor : Tensor<T>{});
  }

  Parameter<T>& weight() { return *weight_; }
  Parameter<T>& bias() { return *bias_; }

 private:
  Parameter<T>* weight_ = nullptr;
  Parameter<T>* bias_ = nullptr;
};

template <typename T>
class GroupNorm : public Module<T> {
 public:
  GroupNorm(std::size_t channels, std::size_t max_groups)
      : groups_(resolve_groups(channels, max_groups)) {
    gamma_ = &this->register_parameter("gamma", Tensor<T>::ones({channels}));
    beta_ = &this->register_parameter("beta", Tensor<T>::zeros({channels}));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return group_norm(x, groups_, gamma_->tensor, beta_->tensor);
  }

  std::size_t groups() const { return groups_; }

 private:
  std::size_t groups_;
  Parameter<T>* gamma_;
  Parameter<T>* beta_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(std::size_t width) {
    gamma_ = &this->register_parameter("gamma", Tensor<T>::ones({width}));
    beta_ = &this->register_parameter("beta", Tensor<T>::zeros({width}));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma_->tensor, beta_->tensor); }

 private:
  Parameter<T>* gamma_;
  Parameter<T>* beta_;
};

/// conv -> group norm -> ReLU.
template <typename T>
class ConvNormRelu : public Module<T> {
 public:
  ConvNormRelu(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt,
               std::size_t norm_groups, Rng& rng) {
    conv_ = &this->register_module("conv", std::make_unique<Conv2d<T>>(in, out, kernel, opt, rng));
    norm_ = &this->register_module("norm", std::make_unique<GroupNorm<T>>(out, norm_groups));
  }

  Tensor<T> forward(const Tensor<T>& x) const { return relu(norm_->forward(conv_->forward(x))); }

  Conv2d<T>& conv() { return *conv_; }

 private:
  Conv2d<T>* conv_;
  GroupNorm<T>* norm_;
};

}  // namespace mkga

#pragma once

// Dense row-major tensors with a reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node holding data, an optional
// gradient buffer and the closure that propagates gradients to its inputs.
// Copying a Tensor aliases the node; use detach() or clone() for an
// independent value.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mkga/errors.hpp"

namespace mkga {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// While alive, newly created op results carry no graph.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into inputs[i]->grad where required.
  std::function<void(Node&)> backward_fn;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(mkga::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (mkga::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), T(1), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, value, requires_grad);
  }

  /// Wraps a node produced by an op. Internal.
  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  /// Gradient as a standalone tensor (zeros if none accumulated yet).
  Tensor grad_tensor() const {
    if (node_->grad.empty()) return Tensor(shape());
    return Tensor(shape(), node_->grad);
  }

  /// Same values, no graph, no gradient.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate (+=).
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result; records the graph only when an input needs it.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (node->data.size() != numel(node->shape)) {
    throw ShapeError("internal: op produced " + std::to_string(node->data.size()) +
                     " values for shape " + to_string(node->shape));
  }
  if (grad_mode_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      node->is_leaf = false;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

/// True when the i-th input of `self` takes part in the backward pass.
template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
  const auto& in = self.inputs[i];
  return in && in->requires_grad;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: every node appears once, inputs before users.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (n->is_leaf) {
      if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
    } else {
      n->grad.assign(n->data.size(), T(0));
    }
  }
  node_->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf) continue;
    n->backward_fn(*n);
    // Interior gradients are scratch; release them once propagated.
    std::vector<T>().swap(n->grad);
  }
}

}  // namespace mkga

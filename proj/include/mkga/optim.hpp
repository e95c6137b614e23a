#pragma once

// PCGrad gradient surgery, AdamW with decoupled weight decay, and early
// stopping on validation loss.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/module.hpp"
#include "mkga/rng.hpp"

namespace mkga {

/// Per-task flat gradients over one fixed parameter ordering.
struct TaskGradients {
  std::vector<std::string> tasks;
  std::vector<std::vector<double>> grads;

  std::size_t size() const { return grads.empty() ? 0 : grads.front().size(); }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Projects each task gradient off every conflicting (negative dot product)
/// original gradient, visiting the others in shuffled order. Returns the
/// surgered gradient of every task.
inline std::vector<std::vector<double>> pcgrad_project(const TaskGradients& tg, Rng& rng) {
  const std::size_t k = tg.grads.size();
  if (k < 2) throw UsageError("pcgrad: at least two task gradients are required");
  const std::size_t len = tg.size();
  for (const auto& g : tg.grads) {
    if (g.size() != len) throw ShapeError("pcgrad: task gradients differ in length");
    for (double v : g)
      if (!std::isfinite(v)) throw NumericalError("pcgrad: non-finite task gradient");
  }
  std::vector<double> sq(k);
  for (std::size_t j = 0; j < k; ++j) sq[j] = dot(tg.grads[j], tg.grads[j]);

  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> gi = tg.grads[i];
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) others.push_back(j);
    rng.shuffle(others);
    for (std::size_t j : others) {
      if (sq[j] == 0.0) continue;
      const double d = dot(gi, tg.grads[j]);
      if (d < 0.0) {
        const double c = d / sq[j];
        for (std::size_t x = 0; x < len; ++x) gi[x] -= c * tg.grads[j][x];
      }
    }
    out.push_back(std::move(gi));
  }
  return out;
}

/// Sum of the surgered task gradients, accumulated in task order from zero.
inline std::vector<double> pcgrad(const TaskGradients& tg, Rng& rng) {
  const auto surgered = pcgrad_project(tg, rng);
  std::vector<double> combined(tg.size(), 0.0);
  for (const auto& g : surgered)
    for (std::size_t x = 0; x < combined.size(); ++x) combined[x] += g[x];
  return combined;
}

/// Cosine similarity for every task pair (i < j), row-major over pairs.
/// Pairs involving a zero gradient report 0.
inline std::vector<double> pairwise_cosines(const TaskGradients& tg) {
  std::vector<double> out;
  for (std::size_t i = 0; i < tg.grads.size(); ++i)
    for (std::size_t j = i + 1; j < tg.grads.size(); ++j) {
      const double ni = std::sqrt(dot(tg.grads[i], tg.grads[i]));
      const double nj = std::sqrt(dot(tg.grads[j], tg.grads[j]));
      out.push_back(ni > 0 && nj > 0 ? dot(tg.grads[i], tg.grads[j]) / (ni * nj) : 0.0);
    }
  return out;
}

/// Concatenates the gradients of `params` (zeros where none accumulated).
template <typename T>
std::vector<double> flatten_grads(const std::vector<Parameter<T>*>& params) {
  std::vector<double> out;
  for (const auto* p : params) {
    if (p->tensor.has_grad())
      out.insert(out.end(), p->tensor.grad().begin(), p->tensor.grad().end());
    else
      out.insert(out.end(), p->tensor.numel(), 0.0);
  }
  return out;
}

/// Overwrites the gradients of `params` with consecutive slices of `flat`.
template <typename T>
void assign_grads(const std::vector<Parameter<T>*>& params, std::span<const double> flat) {
  std::size_t off = 0;
  for (auto* p : params) {
    auto g = p->tensor.mutable_grad();
    if (off + g.size() > flat.size()) throw ShapeError("assign_grads: flat gradient too short");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(flat[off + i]);
    off += g.size();
  }
  if (off != flat.size()) throw ShapeError("assign_grads: flat gradient too long");
}

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// One AdamW update of `weights` in place. Weight decay is decoupled:
/// w <- w (1 - lr wd), then the bias-corrected Adam step.
template <typename T>
void adamw_update(std::span<T> weights, std::span<const T> grads, AdamState& s, const AdamWOptions& o) {
  if (s.m.empty()) {
    s.m.assign(weights.size(), 0.0);
    s.v.assign(weights.size(), 0.0);
  }
  s.t += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double g = grads[i];
    s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * g;
    s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * g * g;
    double w = weights[i];
    w *= 1.0 - o.lr * o.weight_decay;
    w -= o.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + o.eps);
    weights[i] = static_cast<T>(w);
  }
}

/// AdamW over the trainable parameters it was constructed with.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts), state_(params_.size()) {
    for (auto* p : params_)
      if (!p->trainable) throw ConfigError("adamw: parameter " + p->name + " is frozen");
  }

  /// Applies one step using each parameter's accumulated gradient. Parameters
  /// that never received a gradient are left untouched. Nothing is modified if
  /// any gradient is non-finite.
  void step() {
    for (auto* p : params_) {
      if (!p->tensor.has_grad()) continue;
      for (T g : p->tensor.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericalError("adamw: non-finite gradient in parameter " + p->name);
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->tensor.has_grad()) continue;
      adamw_update<T>(p->tensor.data(), p->tensor.grad(), state_[i], opts_);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->tensor.zero_grad();
  }

  const std::vector<Parameter<T>*>& parameters() const { return params_; }
  AdamWOptions& options() { return opts_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWOptions opts_;
  std::vector<AdamState> state_;
};

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ConfigError("early_stopper: patience must be >= 1");
  }

  /// Records one epoch; returns true when training should stop.
  bool update(double val_loss) {
    const std::size_t epoch = history_.size();
    history_.push_back(val_loss);
    if (epoch == 0 || val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
    }
    stopped_ = bad_epochs_ >= patience_;
    return stopped_;
  }

  bool stopped() const { return stopped_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  const std::vector<double>& history() const { return history_; }

 private:
  std::size_t patience_;
  std::vector<double> history_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t bad_epochs_ = 0;
  bool stopped_ = false;
};

struct EarlyStopDecision {
  bool stop = false;
  std::size_t stop_epoch = 0;  // valid when stop
  std::size_t best_epoch = 0;
};

/// Replays a validation-loss history through EarlyStopper.
inline EarlyStopDecision early_stop(std::span<const double> history, std::size_t patience) {
  EarlyStopper s(patience);
  EarlyStopDecision d;
  for (std::size_t e = 0; e < history.size(); ++e) {
    if (s.update(history[e])) {
      d.stop = true;
      d.stop_epoch = e;
      break;
    }
  }
  d.best_epoch = s.best_epoch();
  return d;
}

}  // namespace mkga

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/ops.hpp"
#include "mkga/rng.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

struct GradCheckOptions {
  double h = 1e-3;
  /// Coordinates sampled per tensor; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Exclude coordinates whose +-h evaluations switch any relu on or off
  /// (the function is not differentiable inside the stencil there).
  bool skip_relu_kinks = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  /// Coordinates excluded because the stencil straddled a relu kink.
  std::size_t kinks_skipped = 0;
};

/// Compares reverse-mode gradients of the scalar f() with respect to `params`
/// against central differences. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
template <typename F>
GradCheckResult finite_diff_check(F&& f, const std::vector<std::pair<std::string, Tensor<double>>>& params,
                                  GradCheckOptions opts = {}) {
  if (!(opts.h > 0)) throw ConfigError("finite_diff_check: h must be positive");
  for (auto [name, t] : params) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::uint64_t base_pattern = 0;
  Tensor<double> loss;
  {
    ReluPatternProbe probe;
    loss = f();
    base_pattern = probe.signature();
  }
  if (!std::isfinite(loss.item())) throw NumericalError("finite_diff_check: loss is non-finite at the base point");
  loss.backward();

  GradCheckResult result;
  Rng rng(opts.seed);
  for (auto [name, t] : params) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_tensor && coords.size() > opts.max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto& data = t.storage();
    for (std::size_t i : coords) {
      const double saved = data[i];
      double plus, minus;
      bool kink = false;
      {
        NoGradGuard guard;
        ReluPatternProbe up;
        data[i] = saved + opts.h;
        plus = f().item();
        kink = up.signature() != base_pattern;
      }
      {
        NoGradGuard guard;
        ReluPatternProbe down;
        data[i] = saved - opts.h;
        minus = f().item();
        kink = kink || down.signature() != base_pattern;
      }
      data[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericalError("finite_diff_check: non-finite loss when perturbing " + name + "[" +
                             std::to_string(i) + "]");
      }
      if (kink && opts.skip_relu_kinks) {
        ++result.kinks_skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * opts.h);
      const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / denom;
      ++result.coordinates;
      if (result.worst_tensor.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace mkga

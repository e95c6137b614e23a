#pragma once

// Finite-difference checks of every differentiable op and adapter block in
// double precision, at small shapes.

#include <chrono>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mkga/adapters.hpp"
#include "mkga/gradcheck.hpp"
#include "mkga/losses.hpp"
#include "mkga/network.hpp"

namespace mkga {

struct BlockCheck {
  std::string name;
  GradCheckResult result;
  double tolerance = 1e-4;
  double seconds = 0.0;

  bool passed() const { return result.max_rel_error < tolerance; }
};

namespace detail {

using Named = std::vector<std::pair<std::string, Tensor<double>>>;

inline Tensor<double> random_tensor(const Shape& shape, Rng& rng, double sd = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.storage()) v = rng.normal(0.0, sd);
  return t;
}

// Fixed random projection of a block output to a scalar.
inline Tensor<double> project(const Tensor<double>& y, const Tensor<double>& r) { return sum(mul(y, r)); }

inline Named with_params(Module<double>& m, Named extra) {
  for (auto* p : m.parameters()) extra.emplace_back(p->name, p->tensor);
  return extra;
}

}  // namespace detail

/// Runs the full suite; `coords_full_model` bounds sampled coordinates per
/// tensor in the whole-model check (0 = all).
inline std::vector<BlockCheck> run_gradcheck_suite(std::uint64_t seed = 0, std::size_t coords_full_model = 4) {
  using detail::Named;
  using detail::project;
  using detail::random_tensor;
  std::vector<BlockCheck> out;
  Rng rng(seed);

  auto check = [&](const std::string& name, const std::function<Tensor<double>()>& f, const Named& params,
                   double tol = 1e-4, GradCheckOptions opts = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    BlockCheck b;
    b.name = name;
    b.tolerance = tol;
    b.result = finite_diff_check(f, params, opts);
    b.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(b));
  };

  for (std::size_t d : {1, 2, 3}) {
    auto x = random_tensor({2, 3, 7, 7}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    const Conv2dOptions opt{1, d, d};
    auto r = random_tensor({2, 4, 7, 7}, rng);
    check("conv2d_d" + std::to_string(d), [=] { return project(conv2d(x, w, b, opt), r); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  {
    auto x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({2, 3, 3, 3}, rng);
    const Conv2dOptions opt{2, 1, 1};
    auto r = random_tensor({2, 2, 4, 4}, rng);
    check("conv2d_stride2", [=] { return project(conv2d(x, w, Tensor<double>{}, opt), r); }, {{"x", x}, {"w", w}});
  }
  {
    auto x = random_tensor({2, 4, 3, 3}, rng), g = random_tensor({4}, rng), b = random_tensor({4}, rng);
    auto r = random_tensor({2, 4, 3, 3}, rng);
    check("group_norm", [=] { return project(group_norm(x, 2, g, b), r); }, {{"x", x}, {"gamma", g}, {"beta", b}});
  }
  {
    Rng init(seed + 1);
    auto q = std::make_shared<Linear<double>>(8, 8, init), k = std::make_shared<Linear<double>>(8, 8, init);
    auto v = std::make_shared<Linear<double>>(8, 8, init), o = std::make_shared<Linear<double>>(8, 8, init);
    auto x = random_tensor({2, 5, 8}, rng), r = random_tensor({2, 5, 8}, rng);
    Named ps{{"x", x}};
    for (auto* m : {q.get(), k.get(), v.get(), o.get()})
      for (auto* p : m->parameters()) ps.emplace_back(p->name, p->tensor);
    check("multi_head_attention",
          [=] {
            auto call = [](const std::shared_ptr<Linear<double>>& l) { return [l](const Tensor<double>& t) { return l->forward(t); }; };
            return project(multi_head_attention(x, 2, call(q), call(k), call(v), call(o)), r);
          },
          ps);
  }

  AdapterConfig cfg;
  cfg.norm_groups = 2;
  {
    Rng init(seed + 2);
    auto m = std::make_shared<MultiKernelRefine<double>>(3, 4, cfg, init);
    auto x = random_tensor({2, 3, 6, 6}, rng), r = random_tensor({2, 4, 6, 6}, rng);
    check("multi_kernel_refine", [=] { return project(m->forward(x), r); }, detail::with_params(*m, {{"x", x}}));
  }
  {
    Rng init(seed + 3);
    auto m = std::make_shared<AttentionGate<double>>(5, 4, init);
    auto xh = random_tensor({2, 5, 4, 4}, rng), xr = random_tensor({2, 4, 4, 4}, rng), r = random_tensor({2, 4, 4, 4}, rng);
    check("attention_gate", [=] { return project(m->forward(xh, xr).gated, r); },
          detail::with_params(*m, {{"x_high", xh}, {"x_ref", xr}}));
  }
  {
    Rng init(seed + 4);
    auto m = std::make_shared<MkgaBlock<double>>(4, 3, 4, cfg, init);
    auto xh = random_tensor({2, 4, 4, 4}, rng), xs = random_tensor({2, 3, 4, 4}, rng), r = random_tensor({2, 4, 4, 4}, rng);
    check("mkga_fuse", [=] { return project(m->forward(xh, xs), r); }, detail::with_params(*m, {{"x_high", xh}, {"x_skip", xs}}));
  }
  {
    Rng init(seed + 5);
    auto m = std::make_shared<SeBlock<double>>(8, 4, init);
    auto x = random_tensor({2, 8, 3, 3}, rng), r = random_tensor({2, 8, 3, 3}, rng);
    check("se_block", [=] { return project(m->forward(x), r); }, detail::with_params(*m, {{"x", x}}));
  }
  {
    Rng init(seed + 6);
    AdapterConfig c = cfg;
    c.se_reduction = 4;
    auto m = std::make_shared<ResMkga<double>>(8, c, init);
    auto x = random_tensor({2, 8, 3, 3}, rng), r = random_tensor({2, 8, 3, 3}, rng);
    check("res_mkga_enhance", [=] { return project(m->forward(x), r); }, detail::with_params(*m, {{"x", x}}));
  }
  {
    Rng init(seed + 7);
    auto m = std::make_shared<Aspp<double>>(3, std::vector<std::size_t>{1, 2}, 4, 2, init);
    auto x = random_tensor({2, 3, 5, 5}, rng), r = random_tensor({2, 4, 5, 5}, rng);
    check("aspp", [=] { return project(m->forward(x), r); }, detail::with_params(*m, {{"x", x}}));
  }
  {
    Rng init(seed + 8);
    auto m = std::make_shared<PseudoSkipPyramid<double>>(4, std::vector<std::size_t>{1, 2, 4}, std::vector<std::size_t>{4, 4, 2}, 2, init);
    auto x = random_tensor({1, 4, 2, 2}, rng);
    auto r0 = random_tensor({1, 4, 2, 2}, rng), r1 = random_tensor({1, 4, 4, 4}, rng), r2 = random_tensor({1, 2, 8, 8}, rng);
    check("pseudo_skip_pyramid",
          [=] {
            auto ys = m->forward(x);
            return add(add(project(ys[0], r0), project(ys[1], r1)), project(ys[2], r2));
          },
          detail::with_params(*m, {{"x", x}}));
  }
  {
    auto x = random_tensor({3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
    auto a = random_tensor({2, 5}, rng), bb = random_tensor({4, 2}, rng), r = random_tensor({3, 4}, rng);
    check("lora_linear", [=] { return project(lora_linear(x, w, b, a, bb, 8.0), r); },
          {{"x", x}, {"W", w}, {"b", b}, {"A", a}, {"B", bb}});
  }
  {
    auto logits = random_tensor({2, 2, 4, 4}, rng);
    std::vector<std::uint8_t> mask(2 * 16);
    for (auto& v : mask) v = rng.uniform() < 0.5;
    check("dice_loss", [=] { return dice_loss(softmax(logits, 1), mask); }, {{"logits", logits}});
    check("pixel_ce", [=] { return pixel_ce(logits, mask); }, {{"logits", logits}});
  }
  {
    auto logits = random_tensor({4, 3}, rng);
    const std::vector<int> labels = {0, 2, kAbsent, 1};
    check("image_ce", [=] { return image_ce(logits, std::span<const int>(labels)); }, {{"logits", logits}});
  }
  {
    AdapterConfig mc;
    mc.decoder_widths = {8, 8, 8};
    mc.norm_groups = 2;
    mc.aspp_rates = {1, 2};
    mc.use_res_mkga = true;
    Backbone bb{BackboneKind::kTinyCnn, {4, 8, 8, 16}, false};
    auto model = std::shared_ptr<Model<double>>(build_model<double>(bb, mc, seed + 9, 16).release());
    auto x = random_tensor({2, 1, 16, 16}, rng);
    Targets t;
    t.masks.resize(2 * 256);
    for (auto& v : t.masks) v = rng.uniform() < 0.4;
    t.malignancy = {0, 1};
    t.position = {2, kAbsent};
    GradCheckOptions opts;
    opts.max_coords_per_tensor = coords_full_model;
    opts.seed = seed;
    check("full_model", [=] { return total_loss(model->forward(x), t, LossWeights{}).total; },
          detail::with_params(*model, {{"image", x}}), 1e-3, opts);
  }
  return out;
}

}  // namespace mkga

#pragma once

// Differentiable tensor operations. Every op computes its forward result
// eagerly and, when an input requires a gradient, records a closure that
// accumulates input gradients from the result gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/tensor.hpp"

namespace mkga {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(s));
  }
}

// Output shape and per-operand strides (0 on broadcast axes) for a binary op.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t oa = r - a.size(), ob = r - b.size();
    const std::size_t da = i >= oa ? a[i - oa] : 1;
    const std::size_t db = i >= ob ? b[i - ob] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b));
    }
    p.out[i] = std::max(da, db);
    if (i >= oa && da != 1) p.stride_a[i] = sa[i - oa];
    if (i >= ob && db != 1) p.stride_b[i] = sb[i - ob];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) over the broadcast output.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = numel(p.out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    f(flat, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                           DA dfda, DB dfdb) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    const auto& av = a.storage();
    const auto& bv = b.storage();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return make_result<T>(a.shape(), std::move(out), {a, b}, [dfda, dfdb](Node<T>& self) {
      const auto& av = self.inputs[0]->data;
      const auto& bv = self.inputs[1]->data;
      const std::size_t n = self.grad.size();
      if (wants_grad(self, 0)) {
        auto& ga = self.inputs[0]->grad;
        for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * dfda(av[i], bv[i]);
      }
      if (wants_grad(self, 1)) {
        auto& gb = self.inputs[1]->grad;
        for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * dfdb(av[i], bv[i]);
      }
    });
  }
  BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(numel(plan.out));
  const auto& av = a.storage();
  const auto& bv = b.storage();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = fwd(av[ia], bv[ib]);
  });
  Shape out_shape = plan.out;
  return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                        [plan, dfda, dfdb](Node<T>& self) {
                          const auto& av = self.inputs[0]->data;
                          const auto& bv = self.inputs[1]->data;
                          const bool ga_on = wants_grad(self, 0);
                          const bool gb_on = wants_grad(self, 1);
                          for_each_broadcast(plan, [&](std::size_t o, std::size_t ia,
                                                       std::size_t ib) {
                            const T g = self.grad[o];
                            if (ga_on) self.inputs[0]->grad[ia] += g * dfda(av[ia], bv[ib]);
                            if (gb_on) self.inputs[1]->grad[ib] += g * dfdb(av[ia], bv[ib]);
                          });
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.storage());
  for (auto& v : out) v *= factor;
  return make_result<T>(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

namespace detail {
inline thread_local std::uint64_t* relu_pattern = nullptr;
}  // namespace detail

/// While alive, folds the on/off pattern of every relu evaluated on this
/// thread into a signature. Two evaluations with equal signatures took the
/// same piecewise-linear branch everywhere.
class ReluPatternProbe {
 public:
  ReluPatternProbe() : prev_(detail::relu_pattern) { detail::relu_pattern = &sig_; }
  ~ReluPatternProbe() { detail::relu_pattern = prev_; }
  ReluPatternProbe(const ReluPatternProbe&) = delete;
  ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;

  std::uint64_t signature() const { return sig_; }

 private:
  std::uint64_t sig_ = 0xcbf29ce484222325ull;
  std::uint64_t* prev_;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (auto* sig = detail::relu_pattern) {
    for (std::size_t i = 0; i < out.size(); ++i) *sig = (*sig ^ (xv[i] > T(0) ? 1u : 2u)) * 0x100000001b3ull;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    const auto& xv = self.inputs[0]->data;
    auto& g = self.inputs[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) g[i] += self.grad[i];
  });
}

/// Logistic sigmoid; results are clamped into the open interval (0, 1).
template <typename T>
T sigmoid_scalar(T x) {
  constexpr T lo = std::numeric_limits<T>::min();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  T y;
  if (x >= T(0)) {
    y = T(1) / (T(1) + std::exp(-x));
  } else {
    const T e = std::exp(x);
    y = e / (T(1) + e);
  }
  return std::clamp(y, lo, hi);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const auto& xv = x.storage();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
  return make_result<T>(x.shape(), out, {x}, [y = out](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i] * (T(1) - y[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.storage()) acc += static_cast<double>(v);
  return make_result<T>(Shape{}, {static_cast<T>(acc)}, {x}, [](Node<T>& self) {
    const T g = self.grad[0];
    for (auto& v : self.inputs[0]->grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return make_result<T>(std::move(shape), x.storage(), {x}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Generic axis permutation; out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) throw ShapeError("permute: rank mismatch for " + to_string(in));
  Shape out_shape(in.size());
  const auto in_strides = detail::contiguous_strides(in);
  std::vector<std::size_t> src_stride(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size()) throw ShapeError("permute: axis out of range");
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  // Map output flat index -> input flat index once; reused by backward.
  std::vector<std::size_t> src(x.numel());
  {
    detail::BroadcastPlan p{out_shape, src_stride, std::vector<std::size_t>(in.size(), 0)};
    detail::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t) { src[o] = ia; });
  }
  std::vector<T> out(x.numel());
  const auto& xv = x.storage();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[src[o]];
  return make_result<T>(std::move(out_shape), std::move(out), {x},
                        [src = std::move(src)](Node<T>& self) {
                          auto& g = self.inputs[0]->grad;
                          for (std::size_t o = 0; o < src.size(); ++o) g[src[o]] += self.grad[o];
                        });
}

/// Broadcasts x to `shape` (numpy rules).
template <typename T>
Tensor<T> expand(const Tensor<T>& x, const Shape& shape) {
  detail::BroadcastPlan p = detail::plan_broadcast(x.shape(), shape, "expand");
  if (p.out != shape) {
    throw ShapeError("expand: " + to_string(x.shape()) + " does not broadcast to " +
                     to_string(shape));
  }
  std::vector<T> out(numel(shape));
  const auto& xv = x.storage();
  detail::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = xv[ia]; });
  return make_result<T>(shape, std::move(out), {x}, [p](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    detail::for_each_broadcast(p, [&](std::size_t o, std::size_t ia, std::size_t) {
      g[ia] += self.grad[o];
    });
  });
}

/// Concatenates along axis 1. All other extents must agree.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = xs.front().shape();
  if (first.size() < 2) throw ShapeError("concat_channels: rank < 2 input " + to_string(first));
  std::size_t channels = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == first[d];
    if (!ok) {
      throw ShapeError("concat_channels: incompatible shapes " + to_string(first) + " and " +
                       to_string(s));
    }
    channels += s[1];
  }
  const std::size_t n = first[0];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < first.size(); ++d) inner *= first[d];
  Shape out_shape = first;
  out_shape[1] = channels;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = b * channels * inner;
    for (const auto& t : xs) {
      const std::size_t block = t.dim(1) * inner;
      std::copy_n(t.storage().begin() + b * block, block, out.begin() + offset);
      offset += block;
    }
  }
  for (const auto& t : xs) widths.push_back(t.dim(1) * inner);
  return make_result<T>(std::move(out_shape), std::move(out), xs,
                        [n, channels, inner, widths](Node<T>& self) {
                          for (std::size_t b = 0; b < n; ++b) {
                            std::size_t offset = b * channels * inner;
                            for (std::size_t i = 0; i < widths.size(); ++i) {
                              if (wants_grad(self, i)) {
                                auto& g = self.inputs[i]->grad;
                                for (std::size_t k = 0; k < widths[i]; ++k)
                                  g[b * widths[i] + k] += self.grad[offset + k];
                              }
                              offset += widths[i];
                            }
                          }
                        });
}

/// Channels [start, start+len) of an [N,C,...] tensor.
template <typename T>
Tensor<T> narrow_channels(const Tensor<T>& x, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  if (s.size() < 2 || start + len > s[1] || len == 0) {
    throw ShapeError("narrow_channels: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") invalid for " + to_string(s));
  }
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[1] = len;
  const std::size_t n = s[0], c = s[1];
  std::vector<T> out(numel(out_shape));
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x.storage().begin() + (b * c + start) * inner, len * inner,
                out.begin() + b * len * inner);
  return make_result<T>(std::move(out_shape), std::move(out), {x},
                        [n, c, start, len, inner](Node<T>& self) {
                          auto& g = self.inputs[0]->grad;
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t k = 0; k < len * inner; ++k)
                              g[(b * c + start) * inner + k] += self.grad[b * len * inner + k];
                        });
}

/// [N,C,H,W] -> [N,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(nc);
  const auto& xv = x.storage();
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) acc += xv[i * hw + k];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return make_result<T>(Shape{x.dim(0), x.dim(1)}, std::move(out), {x}, [nc, hw](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t k = 0; k < hw; ++k) g[i * hw + k] += self.grad[i] * inv;
  });
}

enum class UpsampleMode { kNearest, kBilinear };

/// Integer-factor spatial upsampling of [N,C,H,W]. Bilinear uses half-pixel
/// centers with edge clamping (align_corners = false).
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, std::size_t factor, UpsampleMode mode = UpsampleMode::kBilinear) {
  detail::require_rank(x.shape(), 4, "upsample");
  if (factor == 0) throw ShapeError("upsample: factor must be positive");
  if (factor == 1) return x;
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;

  // Per output coordinate: two source taps and the weight of the second.
  struct Tap {
    std::size_t i0, i1;
    T frac;
  };
  auto taps = [&](std::size_t in, std::size_t out_len) {
    std::vector<Tap> t(out_len);
    for (std::size_t o = 0; o < out_len; ++o) {
      if (mode == UpsampleMode::kNearest) {
        t[o] = {o / factor, o / factor, T(0)};
      } else {
        double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
        if (src < 0) src = 0;
        std::size_t i0 = static_cast<std::size_t>(src);
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        t[o] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
      }
    }
    return t;
  };
  auto ty = taps(h, oh), tx = taps(w, ow);

  std::vector<T> out(nc * oh * ow);
  const auto& xv = x.storage();
  for (std::size_t p = 0; p < nc; ++p) {
    const T* src = xv.data() + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (std::size_t i = 0; i < oh; ++i) {
      const auto& a = ty[i];
      for (std::size_t j = 0; j < ow; ++j) {
        const auto& b = tx[j];
        const T top = src[a.i0 * w + b.i0] * (T(1) - b.frac) + src[a.i0 * w + b.i1] * b.frac;
        const T bot = src[a.i1 * w + b.i0] * (T(1) - b.frac) + src[a.i1 * w + b.i1] * b.frac;
        dst[i * ow + j] = top * (T(1) - a.frac) + bot * a.frac;
      }
    }
  }
  return make_result<T>(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                        [nc, h, w, oh, ow, ty, tx](Node<T>& self) {
                          auto& gx = self.inputs[0]->grad;
                          for (std::size_t p = 0; p < nc; ++p) {
                            T* dst = gx.data() + p * h * w;
                            const T* go = self.grad.data() + p * oh * ow;
                            for (std::size_t i = 0; i < oh; ++i) {
                              const auto& a = ty[i];
                              for (std::size_t j = 0; j < ow; ++j) {
                                const auto& b = tx[j];
                                const T g = go[i * ow + j];
                                const T gt = g * (T(1) - a.frac), gb = g * a.frac;
                                dst[a.i0 * w + b.i0] += gt * (T(1) - b.frac);
                                dst[a.i0 * w + b.i1] += gt * b.frac;
                                dst[a.i1 * w + b.i0] += gb * (T(1) - b.frac);
                                dst[a.i1 * w + b.i1] += gb * b.frac;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw ShapeError(std::string(op) + ": axis out of range for " + to_string(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t d = 0; d < axis; ++d) a.outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) a.inner *= s[d];
  return a;
}

template <typename T>
std::vector<T> softmax_values(const std::vector<T>& x, AxisSplit a, bool log_space) {
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < a.outer; ++o) {
    for (std::size_t i = 0; i < a.inner; ++i) {
      const std::size_t base = o * a.len * a.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < a.len; ++k) mx = std::max(mx, x[base + k * a.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < a.len; ++k) z += std::exp(static_cast<double>(x[base + k * a.inner] - mx));
      const double lse = static_cast<double>(mx) + std::log(z);
      for (std::size_t k = 0; k < a.len; ++k) {
        const double lv = static_cast<double>(x[base + k * a.inner]) - lse;
        out[base + k * a.inner] = static_cast<T>(log_space ? lv : std::exp(lv));
      }
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto a = detail::split_axis(x.shape(), axis, "softmax");
  auto y = detail::softmax_values(x.storage(), a, false);
  return make_result<T>(x.shape(), y, {x}, [a, y](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (std::size_t o = 0; o < a.outer; ++o)
      for (std::size_t i = 0; i < a.inner; ++i) {
        const std::size_t base = o * a.len * a.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < a.len; ++k)
          dot += static_cast<double>(self.grad[base + k * a.inner]) * y[base + k * a.inner];
        for (std::size_t k = 0; k < a.len; ++k) {
          const std::size_t j = base + k * a.inner;
          g[j] += y[j] * (self.grad[j] - static_cast<T>(dot));
        }
      }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto a = detail::split_axis(x.shape(), axis, "log_softmax");
  auto y = detail::softmax_values(x.storage(), a, true);
  return make_result<T>(x.shape(), y, {x}, [a, y](Node<T>& self) {
    auto& g = self.inputs[0]->grad;
    for (std::size_t o = 0; o < a.outer; ++o)
      for (std::size_t i = 0; i < a.inner; ++i) {
        const std::size_t base = o * a.len * a.inner + i;
        double total = 0.0;
        for (std::size_t k = 0; k < a.len; ++k) total += self.grad[base + k * a.inner];
        for (std::size_t k = 0; k < a.len; ++k) {
          const std::size_t j = base + k * a.inner;
          g[j] += self.grad[j] - std::exp(y[j]) * static_cast<T>(total);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// y = x Wᵀ + b over the last axis. x [..., in], weight [out, in], bias [out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank(weight.shape(), 2, "linear weight");
  if (x.rank() < 1 || x.shape().back() != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  }
  const std::size_t d_in = weight.dim(1), d_out = weight.dim(0), rows = x.numel() / d_in;
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != d_out) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " for weight " +
                     to_string(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  std::vector<T> out(rows * d_out);
  {
    detail::ConstMatMap<T> X(x.storage().data(), rows, d_in);
    detail::ConstMatMap<T> W(weight.storage().data(), d_out, d_in);
    detail::MatMap<T> Y(out.data(), rows, d_out);
    Y.noalias() = X * W.transpose();
    if (has_bias) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d_out; ++c) out[r * d_out + c] += bias.storage()[c];
    }
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(std::move(out_shape), std::move(out), std::move(inputs),
                        [rows, d_in, d_out, has_bias](Node<T>& self) {
                          detail::ConstMatMap<T> G(self.grad.data(), rows, d_out);
                          if (wants_grad(self, 0)) {
                            detail::ConstMatMap<T> W(self.inputs[1]->data.data(), d_out, d_in);
                            detail::MatMap<T> GX(self.inputs[0]->grad.data(), rows, d_in);
                            GX.noalias() += G * W;
                          }
                          if (wants_grad(self, 1)) {
                            detail::ConstMatMap<T> X(self.inputs[0]->data.data(), rows, d_in);
                            detail::MatMap<T> GW(self.inputs[1]->grad.data(), d_out, d_in);
                            GW.noalias() += G.transpose() * X;
                          }
                          if (has_bias && wants_grad(self, 2)) {
                            auto& gb = self.inputs[2]->grad;
                            for (std::size_t c = 0; c < d_out; ++c) {
                              double acc = 0.0;
                              for (std::size_t r = 0; r < rows; ++r) acc += self.grad[r * d_out + c];
                              gb[c] += static_cast<T>(acc);
                            }
                          }
                        });
}

/// Batched matrix product: a [B,M,K] times b [B,K,N] (or b [B,N,K] with transpose_b).
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_rank(a.shape(), 3, "bmm");
  detail::require_rank(b.shape(), 3, "bmm");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || kb != k) {
    throw ShapeError("bmm: " + to_string(a.shape()) + " x " + to_string(b.shape()) +
                     (transpose_b ? "ᵀ" : ""));
  }
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::ConstMatMap<T> A(a.storage().data() + i * m * k, m, k);
    detail::MatMap<T> Y(out.data() + i * m * n, m, n);
    if (transpose_b) {
      detail::ConstMatMap<T> B(b.storage().data() + i * n * k, n, k);
      Y.noalias() = A * B.transpose();
    } else {
      detail::ConstMatMap<T> B(b.storage().data() + i * k * n, k, n);
      Y.noalias() = A * B;
    }
  }
  return make_result<T>(Shape{batch, m, n}, std::move(out), {a, b},
                        [batch, m, k, n, transpose_b](Node<T>& self) {
                          for (std::size_t i = 0; i < batch; ++i) {
                            detail::ConstMatMap<T> G(self.grad.data() + i * m * n, m, n);
                            detail::ConstMatMap<T> A(self.inputs[0]->data.data() + i * m * k, m, k);
                            const T* bp = self.inputs[1]->data.data() + i * k * n;
                            if (wants_grad(self, 0)) {
                              detail::MatMap<T> GA(self.inputs[0]->grad.data() + i * m * k, m, k);
                              if (transpose_b)
                                GA.noalias() += G * detail::ConstMatMap<T>(bp, n, k);
                              else
                                GA.noalias() += G * detail::ConstMatMap<T>(bp, k, n).transpose();
                            }
                            if (wants_grad(self, 1)) {
                              T* gbp = self.inputs[1]->grad.data() + i * k * n;
                              if (transpose_b)
                                detail::MatMap<T>(gbp, n, k).noalias() += G.transpose() * A;
                              else
                                detail::MatMap<T>(gbp, k, n).noalias() += A.transpose() * G;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c_in, h, w, c_out, k, ho, wo, stride, pad, dil;
  std::size_t col_rows() const { return c_in * k * k; }
  std::size_t col_cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.ho * g.wo;
        const T* plane = img + c * g.h * g.w;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki * g.dil) - static_cast<long>(g.pad);
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj * g.dil) - static_cast<long>(g.pad);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(g.w)) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* img) {
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.ho * g.wo;
        T* plane = img + c * g.h * g.w;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + ki * g.dil) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const T* src = row + oh * g.wo;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kj * g.dil) - static_cast<long>(g.pad);
            if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[ow];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x [N,C_in,H,W] with weight [C_out,C_in,k,k] plus bias [C_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dOptions opt = {}) {
  detail::require_rank(x.shape(), 4, "conv2d input");
  detail::require_rank(weight.shape(), 4, "conv2d weight");
  if (x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " has " + std::to_string(x.dim(1)) +
                     " channels but weight " + to_string(weight.shape()) + " expects " +
                     std::to_string(weight.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3)) throw ShapeError("conv2d: non-square kernel " + to_string(weight.shape()));
  if (opt.stride == 0 || opt.dilation == 0) throw ShapeError("conv2d: stride and dilation must be >= 1");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != weight.dim(0)) {
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " for weight " + to_string(weight.shape()));
  }
  detail::ConvGeometry g{};
  g.n = x.dim(0);
  g.c_in = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.c_out = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = opt.stride;
  g.pad = opt.padding;
  g.dil = opt.dilation;
  const long span = static_cast<long>(g.dil * (g.k - 1) + 1);
  const long eh = static_cast<long>(g.h + 2 * g.pad) - span;
  const long ew = static_cast<long>(g.w + 2 * g.pad) - span;
  if (eh < 0 || ew < 0) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(span) + " exceeds padded input " +
                     to_string(x.shape()));
  }
  g.ho = static_cast<std::size_t>(eh) / g.stride + 1;
  g.wo = static_cast<std::size_t>(ew) / g.stride + 1;

  const std::size_t kr = g.col_rows(), p = g.col_cols();
  std::vector<T> out(g.n * g.c_out * p);
  std::vector<T> col(g.pointwise() ? 0 : kr * p);
  detail::ConstMatMap<T> W(weight.storage().data(), g.c_out, kr);
  for (std::size_t b = 0; b < g.n; ++b) {
    const T* img = x.storage().data() + b * g.c_in * g.h * g.w;
    const T* colp = img;
    if (!g.pointwise()) {
      detail::im2col(img, g, col.data());
      colp = col.data();
    }
    detail::MatMap<T> Y(out.data() + b * g.c_out * p, g.c_out, p);
    Y.noalias() = W * detail::ConstMatMap<T>(colp, kr, p);
    if (has_bias)
      for (std::size_t c = 0; c < g.c_out; ++c) Y.row(c).array() += bias.storage()[c];
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>(Shape{g.n, g.c_out, g.ho, g.wo}, std::move(out), std::move(inputs),
                        [g, has_bias](Node<T>& self) {
                          const std::size_t kr = g.col_rows(), p = g.col_cols();
                          const bool gx_on = wants_grad(self, 0), gw_on = wants_grad(self, 1);
                          const bool gb_on = has_bias && wants_grad(self, 2);
                          detail::ConstMatMap<T> W(self.inputs[1]->data.data(), g.c_out, kr);
                          std::vector<T> col(g.pointwise() ? 0 : kr * p);
                          std::vector<T> dcol(g.pointwise() ? 0 : kr * p);
                          for (std::size_t b = 0; b < g.n; ++b) {
                            detail::ConstMatMap<T> G(self.grad.data() + b * g.c_out * p, g.c_out, p);
                            const T* img = self.inputs[0]->data.data() + b * g.c_in * g.h * g.w;
                            if (gw_on) {
                              const T* colp = img;
                              if (!g.pointwise()) {
                                detail::im2col(img, g, col.data());
                                colp = col.data();
                              }
                              detail::MatMap<T> GW(self.inputs[1]->grad.data(), g.c_out, kr);
                              GW.noalias() += G * detail::ConstMatMap<T>(colp, kr, p).transpose();
                            }
                            if (gb_on) {
                              auto& gb = self.inputs[2]->grad;
                              for (std::size_t c = 0; c < g.c_out; ++c) {
                                double acc = 0.0;
                                for (std::size_t i = 0; i < p; ++i) acc += G(c, i);
                                gb[c] += static_cast<T>(acc);
                              }
                            }
                            if (gx_on) {
                              T* gimg = self.inputs[0]->grad.data() + b * g.c_in * g.h * g.w;
                              if (g.pointwise()) {
                                detail::MatMap<T>(gimg, kr, p).noalias() += W.transpose() * G;
                              } else {
                                detail::MatMap<T>(dcol.data(), kr, p).noalias() = W.transpose() * G;
                                detail::col2im_add(dcol.data(), g, gimg);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization

/// Group normalization over [N,C,...]: per (sample, group) standardization then
/// per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps = 1e-5) {
  if (x.rank() < 2) throw ShapeError("group_norm: rank < 2 input " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (groups == 0 || c % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (eps <= 0) throw ConfigError("group_norm: eps must be positive");
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("group_norm: affine parameters " + to_string(gamma.shape()) + "/" +
                     to_string(beta.shape()) + " for " + std::to_string(c) + " channels");
  }
  const std::size_t inner = x.numel() / (n * c);
  const std::size_t cpg = c / groups, count = cpg * inner;
  std::vector<T> mean_v(n * groups), rstd_v(n * groups);
  std::vector<T> out(x.numel());
  const auto& xv = x.storage();
  const auto& gv = gamma.storage();
  const auto& bv = beta.storage();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (b * c + gi * cpg) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < count; ++i) s += xv[base + i];
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const double d = xv[base + i] - mu;
        ss += d * d;
      }
      const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(count) + eps);
      mean_v[b * groups + gi] = static_cast<T>(mu);
      rstd_v[b * groups + gi] = static_cast<T>(rstd);
      for (std::size_t ch = 0; ch < cpg; ++ch) {
        const std::size_t cc = gi * cpg + ch;
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t j = base + ch * inner + i;
          out[j] = static_cast<T>((xv[j] - mu) * rstd) * gv[cc] + bv[cc];
        }
      }
    }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [n, c, groups, inner, cpg, count, mean_v, rstd_v](Node<T>& self) {
                          const auto& xv = self.inputs[0]->data;
                          const auto& gv = self.inputs[1]->data;
                          const bool gx_on = wants_grad(self, 0);
                          const bool gg_on = wants_grad(self, 1), gb_on = wants_grad(self, 2);
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t gi = 0; gi < groups; ++gi) {
                              const std::size_t base = (b * c + gi * cpg) * inner;
                              const double mu = mean_v[b * groups + gi];
                              const double rstd = rstd_v[b * groups + gi];
                              double s1 = 0.0, s2 = 0.0;
                              for (std::size_t ch = 0; ch < cpg; ++ch) {
                                const std::size_t cc = gi * cpg + ch;
                                double dg = 0.0, db = 0.0;
                                for (std::size_t i = 0; i < inner; ++i) {
                                  const std::size_t j = base + ch * inner + i;
                                  const double dy = self.grad[j];
                                  const double xhat = (xv[j] - mu) * rstd;
                                  dg += dy * xhat;
                                  db += dy;
                                  s1 += dy * gv[cc];
                                  s2 += dy * gv[cc] * xhat;
                                }
                                if (gg_on) self.inputs[1]->grad[cc] += static_cast<T>(dg);
                                if (gb_on) self.inputs[2]->grad[cc] += static_cast<T>(db);
                              }
                              if (!gx_on) continue;
                              const double m1 = s1 / static_cast<double>(count);
                              const double m2 = s2 / static_cast<double>(count);
                              auto& gx = self.inputs[0]->grad;
                              for (std::size_t ch = 0; ch < cpg; ++ch) {
                                const std::size_t cc = gi * cpg + ch;
                                for (std::size_t i = 0; i < inner; ++i) {
                                  const std::size_t j = base + ch * inner + i;
                                  const double xhat = (xv[j] - mu) * rstd;
                                  gx[j] += static_cast<T>(
                                      rstd * (self.grad[j] * gv[cc] - m1 - xhat * m2));
                                }
                              }
                            }
                        });
}

/// Layer normalization over the last axis with affine gamma/beta [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine size mismatch for " + to_string(x.shape()));
  }
  std::vector<T> mean_v(rows), rstd_v(rows), out(x.numel());
  const auto& xv = x.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += xv[r * d + i];
    const double mu = s / static_cast<double>(d);
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += (xv[r * d + i] - mu) * (xv[r * d + i] - mu);
    const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    mean_v[r] = static_cast<T>(mu);
    rstd_v[r] = static_cast<T>(rstd);
    for (std::size_t i = 0; i < d; ++i)
      out[r * d + i] = static_cast<T>((xv[r * d + i] - mu) * rstd) * gamma.storage()[i] + beta.storage()[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [d, rows, mean_v, rstd_v](Node<T>& self) {
                          const auto& xv = self.inputs[0]->data;
                          const auto& gv = self.inputs[1]->data;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double mu = mean_v[r], rstd = rstd_v[r];
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t i = 0; i < d; ++i) {
                              const std::size_t j = r * d + i;
                              const double dy = self.grad[j];
                              const double xhat = (xv[j] - mu) * rstd;
                              if (wants_grad(self, 1)) self.inputs[1]->grad[i] += static_cast<T>(dy * xhat);
                              if (wants_grad(self, 2)) self.inputs[2]->grad[i] += static_cast<T>(dy);
                              s1 += dy * gv[i];
                              s2 += dy * gv[i] * xhat;
                            }
                            if (!wants_grad(self, 0)) continue;
                            for (std::size_t i = 0; i < d; ++i) {
                              const std::size_t j = r * d + i;
                              const double xhat = (xv[j] - mu) * rstd;
                              self.inputs[0]->grad[j] += static_cast<T>(
                                  rstd * (self.grad[j] * gv[i] - s1 / d - xhat * s2 / d));
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Attention

/// Scaled dot-product multi-head self-attention over x [N,T,D]. The four
/// projections are callables Tensor -> Tensor mapping [N,T,D] to [N,T,D].
template <typename T, typename Q, typename K, typename V, typename O>
Tensor<T> multi_head_attention(const Tensor<T>& x, std::size_t heads, Q&& q_proj, K&& k_proj,
                               V&& v_proj, O&& o_proj) {
  detail::require_rank(x.shape(), 3, "multi_head_attention");
  const std::size_t n = x.dim(0), t = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  auto split = [&](const Tensor<T>& y) {
    return reshape(permute(reshape(y, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  Tensor<T> q = split(q_proj(x));
  Tensor<T> k = split(k_proj(x));
  Tensor<T> v = split(v_proj(x));
  Tensor<T> scores = scale(bmm(q, k, /*transpose_b=*/true), T(1) / std::sqrt(static_cast<T>(dh)));
  Tensor<T> attn = softmax(scores, 2);
  Tensor<T> ctx = bmm(attn, v);
  Tensor<T> merged = reshape(permute(reshape(ctx, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
  return o_proj(merged);
}

}  // namespace mkga

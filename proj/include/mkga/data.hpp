#pragma once

// Synthetic thyroid-ultrasound-like samples for an in-domain "center" and a
// shifted external center, training-time augmentation, and the binary
// dataset file format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mkga/errors.hpp"
#include "mkga/losses.hpp"
#include "mkga/rng.hpp"
#include "mkga/stats.hpp"

namespace mkga {

enum class Domain : std::uint8_t { kIn = 0, kShifted = 1 };
enum class Position : int { kLeft = 0, kIsthmus = 1, kRight = 2 };

inline const char* to_string(Domain d) { return d == Domain::kIn ? "in" : "shifted"; }

struct Sample {
  std::size_t size = 0;            // H == W
  std::vector<float> image;        // [H*W] in [0,1]
  std::vector<std::uint8_t> mask;  // [H*W] in {0,1}
  int tirads = 0;
  int malignancy = 0;
  int position = kAbsent;
  Domain domain = Domain::kIn;
  std::string sample_id;

  bool operator==(const Sample&) const = default;
};

/// Position class of a nodule centered at column cx in an image of width w.
inline Position position_from_center(double cx, double w) {
  if (cx < 0.4 * w) return Position::kLeft;
  if (cx > 0.6 * w) return Position::kRight;
  return Position::kIsthmus;
}

struct GeneratorOptions {
  std::size_t image_size = 64;
  std::array<double, 5> tirads_weights{0.0, 1.0, 1.0, 1.0, 1.0};  // scores 1..5
  // in-domain speckle
  double grain_in = 0.7;
  double speckle_in = 0.30;
  // shifted speckle, gamma range and overlays
  double grain_shifted = 1.6;
  double speckle_shifted = 0.45;
  double gamma_min = 0.6;
  double gamma_max = 1.6;
  bool calipers = true;
  bool text_blocks = true;
};

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable Gaussian blur with edge clamping.
template <typename V>
void blur(std::vector<V>& img, std::size_t n, double sigma) {
  if (sigma <= 0) return;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2), sn = static_cast<int>(n);
  std::vector<double> tmp(img.size());
  for (int y = 0; y < sn; ++y)
    for (int x = 0; x < sn; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * sn + std::clamp(x + i, 0, sn - 1)];
      tmp[y * sn + x] = s;
    }
  for (int y = 0; y < sn; ++y)
    for (int x = 0; x < sn; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[std::clamp(y + i, 0, sn - 1) * sn + x];
      img[y * sn + x] = static_cast<V>(s);
    }
}

// Zero-mean, unit-variance noise with spatial correlation length `grain`.
inline std::vector<double> correlated_noise(std::size_t n, double grain, Rng& rng) {
  std::vector<double> f(n * n);
  for (auto& v : f) v = rng.normal();
  blur(f, n, grain);
  double m = 0.0, s = 0.0;
  for (double v : f) m += v;
  m /= static_cast<double>(f.size());
  for (double v : f) s += (v - m) * (v - m);
  s = std::sqrt(s / static_cast<double>(f.size()));
  for (auto& v : f) v = (v - m) / (s > 0 ? s : 1.0);
  return f;
}

inline int sample_tirads(const std::array<double, 5>& w, Rng& rng) {
  double total = 0.0;
  for (double v : w) total += v;
  if (!(total > 0)) throw ConfigError("generator: tirads weights must have positive mass");
  double u = rng.uniform() * total;
  for (int i = 0; i < 5; ++i) {
    if (u < w[i]) return i + 1;
    u -= w[i];
  }
  for (int i = 4; i >= 0; --i)
    if (w[i] > 0) return i + 1;
  return 5;
}

inline void stamp(std::vector<double>& img, std::size_t n, int x, int y, double v) {
  if (x >= 0 && y >= 0 && x < static_cast<int>(n) && y < static_cast<int>(n)) img[y * n + x] = v;
}

}  // namespace detail

/// One deterministic sample: a pure function of (seed, index, domain).
inline Sample generate_sample(std::uint64_t seed, std::size_t index, Domain domain, const GeneratorOptions& opt = {}) {
  const std::size_t n = opt.image_size;
  if (n < 16) throw ConfigError("generator: image_size must be at least 16");
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(domain) + 1, index));
  const double w = static_cast<double>(n), scale = w / 64.0;

  Sample s;
  s.size = n;
  s.domain = domain;
  char id[64];
  std::snprintf(id, sizeof id, "%s-%016llx-%06zu", to_string(domain), static_cast<unsigned long long>(seed), index);
  s.sample_id = id;
  s.tirads = detail::sample_tirads(opt.tirads_weights, rng);
  s.malignancy = static_cast<int>(binarize_tirads(s.tirads));

  // Smooth dark background with a low-frequency gain field.
  const double base = rng.uniform(0.22, 0.36);
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(0.0, 0.10);
  const double ph = rng.uniform(0.0, 2 * std::numbers::pi), wave = rng.uniform(0.02, 0.05);
  std::vector<double> img(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = x / w - 0.5, v = y / w;
      img[y * n + x] = base + gx * u + gy * v + wave * std::sin(2 * std::numbers::pi * (u + v) * 1.5 + ph);
    }

  // Nodule: rotated ellipse, optionally with an irregular radial boundary.
  const double cx = rng.uniform(0.22, 0.78) * w, cy = rng.uniform(0.32, 0.68) * w;
  const double ax = rng.uniform(7.0, 13.0) * scale, ay = rng.uniform(5.5, 10.0) * scale;
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double contrast = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.14, 0.26);
  const bool high_risk = s.malignancy == 1;
  const double irregular = high_risk ? rng.uniform(0.12, 0.22) : 0.0;
  const int lobes = 5 + static_cast<int>(rng.below(4));
  const double lobe_phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double c = std::cos(theta), sn = std::sin(theta);
  s.mask.assign(n * n, 0);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = (c * dx + sn * dy) / ax, v = (-sn * dx + c * dy) / ay;
      const double rho = std::sqrt(u * u + v * v);
      const double bound = 1.0 + irregular * std::sin(lobes * std::atan2(v, u) + lobe_phase);
      if (rho <= bound) {
        s.mask[y * n + x] = 1;
        img[y * n + x] += contrast;
      }
    }
  s.position = domain == Domain::kIn ? static_cast<int>(position_from_center(cx, w)) : kAbsent;

  // High-risk texture: clusters of bright micro-dots inside the nodule.
  if (high_risk) {
    const int clusters = 1 + static_cast<int>(rng.below(2));
    for (int k = 0; k < clusters; ++k) {
      const double r = rng.uniform(0.0, 0.6), a = rng.uniform(0.0, 2 * std::numbers::pi);
      const double px = cx + r * (c * ax * std::cos(a) - sn * ay * std::sin(a));
      const double py = cy + r * (sn * ax * std::cos(a) + c * ay * std::sin(a));
      const int dots = 3 + static_cast<int>(rng.below(4));
      for (int d = 0; d < dots; ++d) {
        const int x = static_cast<int>(px + rng.normal(0.0, 1.5 * scale));
        const int y = static_cast<int>(py + rng.normal(0.0, 1.5 * scale));
        if (x >= 0 && y >= 0 && x < static_cast<int>(n) && y < static_cast<int>(n) && s.mask[y * n + x])
          img[y * n + x] += 0.45;
      }
    }
  }

  // Multiplicative speckle; the external center has a coarser, stronger grain.
  const bool shifted = domain == Domain::kShifted;
  const auto speckle = detail::correlated_noise(n, shifted ? opt.grain_shifted : opt.grain_in, rng);
  const double amp = shifted ? opt.speckle_shifted : opt.speckle_in;
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = std::clamp(img[i] * std::max(0.0, 1.0 + amp * speckle[i]), 0.0, 1.0);

  if (shifted) {
    const double gamma = rng.uniform(opt.gamma_min, opt.gamma_max);
    for (auto& v : img) v = std::pow(v, gamma);
    if (opt.calipers) {
      // Cross-shaped caliper marks just outside both ends of the major axis.
      const int arm = std::max(2, static_cast<int>(std::lround(2.0 * scale)));
      for (double sign : {-1.0, 1.0}) {
        const double r = ax * (1.0 + irregular) + 2.0 * scale;
        const int x0 = static_cast<int>(std::lround(cx + sign * c * r));
        const int y0 = static_cast<int>(std::lround(cy + sign * sn * r));
        for (int t = -arm; t <= arm; ++t) {
          detail::stamp(img, n, x0 + t, y0, 1.0);
          detail::stamp(img, n, x0, y0 + t, 1.0);
        }
      }
    }
    if (opt.text_blocks) {
      // Rows of bright rectangles in one corner.
      const bool right = rng.uniform() < 0.5, bottom = rng.uniform() < 0.5;
      const int rows = 2 + static_cast<int>(rng.below(2));
      const int h = std::max(2, static_cast<int>(std::lround(2.0 * scale)));
      const int margin = static_cast<int>(std::lround(2.0 * scale));
      for (int r = 0; r < rows; ++r) {
        int x = margin;
        const int blocks = 2 + static_cast<int>(rng.below(3));
        for (int b = 0; b < blocks; ++b) {
          const int bw = static_cast<int>(std::lround(rng.uniform(2.0, 5.0) * scale));
          const double val = rng.uniform(0.85, 1.0);
          for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < bw; ++xx) {
              const int px = right ? static_cast<int>(n) - 1 - (x + xx) : x + xx;
              const int py0 = margin + r * (h + 1) + yy;
              const int py = bottom ? static_cast<int>(n) - 1 - py0 : py0;
              detail::stamp(img, n, px, py, val);
            }
          x += bw + 1;
        }
      }
    }
  }

  s.image.resize(n * n);
  for (std::size_t i = 0; i < img.size(); ++i) s.image[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  return s;
}

/// n samples of one domain; sample i depends only on (seed, i, domain).
inline std::vector<Sample> generate_dataset(std::size_t n, Domain domain, std::uint64_t seed, const GeneratorOptions& opt = {}) {
  if (n == 0) throw ConfigError("generate_dataset: n must be at least 1");
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(seed, i, domain, opt));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
  bool noise = true;
  bool blur = true;
  bool multiplicative = true;
  bool affine = true;
  double probability = 0.5;  // per enabled transform
  double noise_sigma = 0.02;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.0;
  double multiplicative_amp = 0.05;
  double max_scale = 0.08;
  double max_rotation_deg = 15.0;
};

/// Rotates (degrees, counter-clockwise about the image center) and scales a
/// square grid by inverse mapping with bilinear interpolation. Outside
/// samples use `fill`.
template <typename V>
std::vector<double> affine_warp(std::span<const V> src, std::size_t n, double angle_deg, double scale, double fill) {
  const double a = angle_deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  const double mid = (static_cast<double>(n) - 1.0) / 2.0;
  const int sn = static_cast<int>(n);
  auto at = [&](int x, int y) -> double {
    if (x < 0 || y < 0 || x >= sn || y >= sn) return fill;
    return static_cast<double>(src[static_cast<std::size_t>(y) * n + static_cast<std::size_t>(x)]);
  };
  std::vector<double> out(n * n);
  for (int y = 0; y < sn; ++y)
    for (int x = 0; x < sn; ++x) {
      const double dx = (x - mid) / scale, dy = (y - mid) / scale;
      const double sx = c * dx + s * dy + mid, sy = -s * dx + c * dy + mid;
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      out[y * n + x] = (1 - fy) * ((1 - fx) * at(x0, y0) + fx * at(x0 + 1, y0)) +
                       fy * ((1 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1));
    }
  return out;
}

/// Mask warp: bilinear weights thresholded at 1/2.
inline std::vector<std::uint8_t> warp_mask(std::span<const std::uint8_t> mask, std::size_t n, double angle_deg, double scale) {
  const auto w = affine_warp(mask, n, angle_deg, scale, 0.0);
  std::vector<std::uint8_t> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] >= 0.5 ? 1 : 0;
  return out;
}

/// Training-time augmentation. Never flips (laterality carries the position
/// label); labels other than the mask are untouched.
inline Sample augment(const Sample& in, Rng& rng, const AugmentOptions& opt) {
  Sample s = in;
  const std::size_t n = s.size;
  auto fires = [&](bool enabled) { return enabled && rng.uniform() < opt.probability; };
  if (fires(opt.affine)) {
    const double angle = rng.uniform(-opt.max_rotation_deg, opt.max_rotation_deg);
    const double sc = 1.0 + rng.uniform(-opt.max_scale, opt.max_scale);
    auto mask = warp_mask(s.mask, n, angle, sc);
    if (std::any_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; })) {
      double bg = 0.0;
      for (float v : s.image) bg += v;
      const auto img = affine_warp(std::span<const float>(s.image), n, angle, sc, bg / static_cast<double>(s.image.size()));
      for (std::size_t i = 0; i < img.size(); ++i) s.image[i] = static_cast<float>(img[i]);
      s.mask = std::move(mask);
    }
  }
  if (fires(opt.blur)) detail::blur(s.image, n, rng.uniform(opt.blur_sigma_min, opt.blur_sigma_max));
  if (fires(opt.multiplicative)) {
    for (auto& v : s.image) v = static_cast<float>(v * (1.0 + rng.uniform(-opt.multiplicative_amp, opt.multiplicative_amp)));
  }
  if (fires(opt.noise)) {
    for (auto& v : s.image) v = static_cast<float>(v + rng.normal(0.0, opt.noise_sigma));
  }
  for (auto& v : s.image) v = std::clamp(v, 0.0f, 1.0f);
  return s;
}

// ---------------------------------------------------------------------------
// Batching

/// Stacks samples into an [N,1,H,W] image tensor and loss targets.
template <typename T>
std::pair<Tensor<T>, Targets> make_batch(std::span<const Sample> samples) {
  if (samples.empty()) throw UsageError("make_batch: empty batch");
  const std::size_t n = samples.front().size;
  std::vector<T> data;
  data.reserve(samples.size() * n * n);
  Targets t;
  for (const auto& s : samples) {
    if (s.size != n) throw ShapeError("make_batch: samples differ in size");
    data.insert(data.end(), s.image.begin(), s.image.end());
    t.masks.insert(t.masks.end(), s.mask.begin(), s.mask.end());
    t.malignancy.push_back(s.malignancy);
    t.position.push_back(s.position);
  }
  return {Tensor<T>(Shape{samples.size(), 1, n, n}, std::move(data)), std::move(t)};
}

// ---------------------------------------------------------------------------
// Dataset files
//
// Little-endian layout:
//   0   char[4]  "MKGD"
//   4   u32      version (1)
//   8   u32      sample count
//   12  u32      image size (H == W)
//   16  records, each:
//         u32 id length, id bytes (UTF-8)
//         u8 domain (0 in, 1 shifted)
//         i32 tirads, i32 malignancy, i32 position (-1 absent)
//         f32[H*W] image, u8[H*W] mask

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V get(std::istream& is, const std::string& what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(FormatError::Kind::kTruncated, "truncated file while reading " + what);
  return v;
}

inline void get_bytes(std::istream& is, char* dst, std::size_t n, const std::string& what) {
  if (!is.read(dst, static_cast<std::streamsize>(n))) throw FormatError(FormatError::Kind::kTruncated, "truncated file while reading " + what);
}

}  // namespace io

inline void write_dataset(const std::string& path, std::span<const Sample> samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open " + path + " for writing");
  const std::uint32_t n = samples.empty() ? 0 : static_cast<std::uint32_t>(samples.front().size);
  os.write("MKGD", 4);
  io::put<std::uint32_t>(os, kDatasetVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(samples.size()));
  io::put<std::uint32_t>(os, n);
  for (const auto& s : samples) {
    if (s.size != n) throw ShapeError("write_dataset: samples differ in size");
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(s.sample_id.size()));
    os.write(s.sample_id.data(), static_cast<std::streamsize>(s.sample_id.size()));
    io::put<std::uint8_t>(os, static_cast<std::uint8_t>(s.domain));
    io::put<std::int32_t>(os, s.tirads);
    io::put<std::int32_t>(os, s.malignancy);
    io::put<std::int32_t>(os, s.position);
    os.write(reinterpret_cast<const char*>(s.image.data()), static_cast<std::streamsize>(s.image.size() * sizeof(float)));
    os.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write failed for " + path);
}

inline std::vector<Sample> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open " + path);
  char magic[4];
  io::get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "MKGD", 4) != 0) throw FormatError(FormatError::Kind::kBadMagic, path + " is not a dataset file");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, "unsupported dataset version " + std::to_string(version));
  }
  const auto count = io::get<std::uint32_t>(is, "count");
  const auto n = io::get<std::uint32_t>(is, "image size");
  std::vector<Sample> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.size = n;
    const auto len = io::get<std::uint32_t>(is, "id length");
    if (len > 4096) throw FormatError(FormatError::Kind::kSyntax, "implausible sample id length");
    s.sample_id.resize(len);
    io::get_bytes(is, s.sample_id.data(), len, "sample id");
    const auto dom = io::get<std::uint8_t>(is, "domain");
    if (dom > 1) throw FormatError(FormatError::Kind::kSyntax, "bad domain tag in " + s.sample_id);
    s.domain = static_cast<Domain>(dom);
    s.tirads = io::get<std::int32_t>(is, "tirads");
    s.malignancy = io::get<std::int32_t>(is, "malignancy");
    s.position = io::get<std::int32_t>(is, "position");
    s.image.resize(static_cast<std::size_t>(n) * n);
    s.mask.resize(static_cast<std::size_t>(n) * n);
    io::get_bytes(is, reinterpret_cast<char*>(s.image.data()), s.image.size() * sizeof(float), "image of " + s.sample_id);
    io::get_bytes(is, reinterpret_cast<char*>(s.mask.data()), s.mask.size(), "mask of " + s.sample_id);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mkga

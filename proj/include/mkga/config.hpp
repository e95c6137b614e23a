#pragma once

// RunConfig: everything that determines a training run, with a flat
// `key = value` text format (comments start with '#', unknown keys rejected).

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mkga/adapters.hpp"
#include "mkga/data.hpp"
#include "mkga/errors.hpp"
#include "mkga/losses.hpp"
#include "mkga/network.hpp"
#include "mkga/optim.hpp"

namespace mkga {

struct RunConfig {
  std::uint64_t seed = 0;
  BackboneKind backbone = BackboneKind::kTinyCnn;
  AdapterConfig adapter;
  LossWeights loss;
  bool use_pcgrad = false;
  AdamWOptions optim;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::size_t patience = 5;
  std::size_t n_train = 512;
  std::size_t n_val = 128;
  std::size_t n_test_in = 256;
  std::size_t n_test_shifted = 256;
  std::size_t image_size = 64;
  AugmentOptions augment;
  std::string out_dir = "runs/default";

  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + text + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + text + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(key, trim(item)));
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Keys in canonical (serialization) order.
inline const std::vector<std::pair<std::string, ConfigKey>>& config_keys() {
  using K = ConfigKey;
  auto size_key = [](std::size_t RunConfig::*f) {
    return K{[f](RunConfig& c, const std::string& k, const std::string& v) { c.*f = parse_number<std::size_t>(k, v); },
             [f](const RunConfig& c) { return std::to_string(c.*f); }};
  };
  auto bool_adapter = [](bool AdapterConfig::*f) {
    return K{[f](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.*f = parse_bool(k, v); },
             [f](const RunConfig& c) { return std::string(c.adapter.*f ? "true" : "false"); }};
  };
  auto bool_aug = [](bool AugmentOptions::*f) {
    return K{[f](RunConfig& c, const std::string& k, const std::string& v) { c.augment.*f = parse_bool(k, v); },
             [f](const RunConfig& c) { return std::string(c.augment.*f ? "true" : "false"); }};
  };
  auto real_aug = [](double AugmentOptions::*f) {
    return K{[f](RunConfig& c, const std::string& k, const std::string& v) { c.augment.*f = parse_number<double>(k, v); },
             [f](const RunConfig& c) { return format_double(c.augment.*f); }};
  };
  auto real_optim = [](double AdamWOptions::*f) {
    return K{[f](RunConfig& c, const std::string& k, const std::string& v) { c.optim.*f = parse_number<double>(k, v); },
             [f](const RunConfig& c) { return format_double(c.optim.*f); }};
  };
  static const std::vector<std::pair<std::string, K>> keys = {
      {"seed", {[](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"backbone", {[](RunConfig& c, const std::string&, const std::string& v) { c.backbone = parse_backbone(v); },
                    [](const RunConfig& c) { return to_string(c.backbone); }}},
      {"skip_fusion",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "mkga") c.adapter.skip_fusion = SkipFusion::kMkga;
          else if (v == "plain") c.adapter.skip_fusion = SkipFusion::kPlain;
          else throw ConfigError("key '" + k + "': expected mkga or plain, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.adapter.skip_fusion == SkipFusion::kMkga ? "mkga" : "plain"); }}},
      {"kernel_pair", {[](RunConfig& c, const std::string&, const std::string& v) { c.adapter.kernel_pair = parse_kernel_pair(v); },
                       [](const RunConfig& c) { return to_string(c.adapter.kernel_pair); }}},
      {"dense_large_kernel", bool_adapter(&AdapterConfig::dense_large_kernel)},
      {"use_gate", bool_adapter(&AdapterConfig::use_gate)},
      {"use_multikernel", bool_adapter(&AdapterConfig::use_multikernel)},
      {"use_res_mkga", bool_adapter(&AdapterConfig::use_res_mkga)},
      {"use_se", bool_adapter(&AdapterConfig::use_se)},
      {"lora_rank", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.lora_rank = parse_number<std::size_t>(k, v); },
                     [](const RunConfig& c) { return std::to_string(c.adapter.lora_rank); }}},
      {"lora_alpha", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.lora_alpha = parse_number<double>(k, v); },
                      [](const RunConfig& c) { return format_double(c.adapter.lora_alpha); }}},
      {"freeze_encoder", bool_adapter(&AdapterConfig::freeze_encoder)},
      {"decoder_widths", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.decoder_widths = parse_list(k, v); },
                          [](const RunConfig& c) { return format_list(c.adapter.decoder_widths); }}},
      {"norm_groups", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.norm_groups = parse_number<std::size_t>(k, v); },
                       [](const RunConfig& c) { return std::to_string(c.adapter.norm_groups); }}},
      {"se_reduction", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.se_reduction = parse_number<std::size_t>(k, v); },
                        [](const RunConfig& c) { return std::to_string(c.adapter.se_reduction); }}},
      {"aspp_rates", {[](RunConfig& c, const std::string& k, const std::string& v) { c.adapter.aspp_rates = parse_list(k, v); },
                      [](const RunConfig& c) { return format_list(c.adapter.aspp_rates); }}},
      {"head_tap",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "bottleneck") c.adapter.head_tap = HeadTap::kBottleneck;
          else if (v == "decoder") c.adapter.head_tap = HeadTap::kDecoder;
          else throw ConfigError("key '" + k + "': expected bottleneck or decoder, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.adapter.head_tap == HeadTap::kBottleneck ? "bottleneck" : "decoder"); }}},
      {"upsample",
       {[](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "bilinear") c.adapter.upsample_mode = UpsampleMode::kBilinear;
          else if (v == "nearest") c.adapter.upsample_mode = UpsampleMode::kNearest;
          else throw ConfigError("key '" + k + "': expected bilinear or nearest, got '" + v + "'");
        },
        [](const RunConfig& c) { return std::string(c.adapter.upsample_mode == UpsampleMode::kBilinear ? "bilinear" : "nearest"); }}},
      {"lambda_mal", {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.lambda_mal = parse_number<double>(k, v); },
                      [](const RunConfig& c) { return format_double(c.loss.lambda_mal); }}},
      {"lambda_pos", {[](RunConfig& c, const std::string& k, const std::string& v) { c.loss.lambda_pos = parse_number<double>(k, v); },
                      [](const RunConfig& c) { return format_double(c.loss.lambda_pos); }}},
      {"use_pcgrad", {[](RunConfig& c, const std::string& k, const std::string& v) { c.use_pcgrad = parse_bool(k, v); },
                      [](const RunConfig& c) { return std::string(c.use_pcgrad ? "true" : "false"); }}},
      {"lr", real_optim(&AdamWOptions::lr)},
      {"beta1", real_optim(&AdamWOptions::beta1)},
      {"beta2", real_optim(&AdamWOptions::beta2)},
      {"adam_eps", real_optim(&AdamWOptions::eps)},
      {"weight_decay", real_optim(&AdamWOptions::weight_decay)},
      {"epochs", size_key(&RunConfig::epochs)},
      {"batch_size", size_key(&RunConfig::batch_size)},
      {"patience", size_key(&RunConfig::patience)},
      {"n_train", size_key(&RunConfig::n_train)},
      {"n_val", size_key(&RunConfig::n_val)},
      {"n_test_in", size_key(&RunConfig::n_test_in)},
      {"n_test_shifted", size_key(&RunConfig::n_test_shifted)},
      {"image_size", size_key(&RunConfig::image_size)},
      {"aug_noise", bool_aug(&AugmentOptions::noise)},
      {"aug_blur", bool_aug(&AugmentOptions::blur)},
      {"aug_multiplicative", bool_aug(&AugmentOptions::multiplicative)},
      {"aug_affine", bool_aug(&AugmentOptions::affine)},
      {"aug_probability", real_aug(&AugmentOptions::probability)},
      {"aug_noise_sigma", real_aug(&AugmentOptions::noise_sigma)},
      {"aug_blur_sigma_min", real_aug(&AugmentOptions::blur_sigma_min)},
      {"aug_blur_sigma_max", real_aug(&AugmentOptions::blur_sigma_max)},
      {"aug_multiplicative_amp", real_aug(&AugmentOptions::multiplicative_amp)},
      {"aug_max_scale", real_aug(&AugmentOptions::max_scale)},
      {"aug_max_rotation_deg", real_aug(&AugmentOptions::max_rotation_deg)},
      {"out_dir", {[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                   [](const RunConfig& c) { return c.out_dir; }}},
  };
  return keys;
}

}  // namespace detail

inline void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(epochs >= 1, "epochs must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(patience >= 1, "patience must be >= 1");
  need(n_train >= 1 && n_val >= 1 && n_test_in >= 1 && n_test_shifted >= 1, "dataset sizes must be >= 1");
  need(optim.lr >= 0, "lr must be >= 0");
  need(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1, "betas must lie in [0, 1)");
  need(optim.eps > 0, "adam_eps must be > 0");
  need(optim.weight_decay >= 0, "weight_decay must be >= 0");
  need(loss.lambda_mal >= 0 && loss.lambda_pos >= 0, "loss weights must be >= 0");
  need(augment.probability >= 0 && augment.probability <= 1, "aug_probability must lie in [0, 1]");
  need(augment.max_scale >= 0 && augment.max_scale < 0.1, "aug_max_scale must lie in [0, 0.1)");
  need(augment.max_rotation_deg >= 0 && augment.max_rotation_deg <= 15, "aug_max_rotation_deg must lie in [0, 15]");
  need(augment.blur_sigma_min > 0 && augment.blur_sigma_min <= augment.blur_sigma_max, "aug blur sigma range is invalid");
  need(adapter.lora_alpha > 0, "lora_alpha must be > 0");
  Model<float>::validate(Backbone{backbone}, adapter, image_size);
}

/// Parses `key = value` text. Later keys may not repeat earlier ones.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  const auto& keys = detail::config_keys();
  std::map<std::string, const detail::ConfigKey*> index;
  for (const auto& [k, v] : keys) index[k] = &v;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      it->second->set(base, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  base.validate();
  return base;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Canonical text form; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : detail::config_keys()) out += k + " = " + v.get(c) + "\n";
  return out;
}

/// Ablation and reference variants, applied on top of a base config.
inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> v = {"default", "NoGate", "NoMulti", "K1_3", "K3_7", "NoSE", "+PCGrad"};
  return v;
}

inline RunConfig apply_variant(RunConfig c, const std::string& name) {
  if (name == "default" || name == "K3_5") {
    c.adapter.kernel_pair = KernelPair::kK3_5;
  } else if (name == "NoGate") {
    c.adapter.use_gate = false;
  } else if (name == "NoMulti") {
    c.adapter.use_multikernel = false;
  } else if (name == "K1_3") {
    c.adapter.kernel_pair = KernelPair::kK1_3;
  } else if (name == "K3_7") {
    c.adapter.kernel_pair = KernelPair::kK3_7;
  } else if (name == "ResMKGA") {
    c.adapter.use_res_mkga = true;
    c.adapter.use_se = true;
  } else if (name == "NoSE") {
    c.adapter.use_res_mkga = true;
    c.adapter.use_se = false;
  } else if (name == "+PCGrad") {
    c.use_pcgrad = true;
  } else if (name == "plain") {
    c.adapter.skip_fusion = SkipFusion::kPlain;
  } else {
    throw ConfigError("unknown variant '" + name +
                      "' (expected default, NoGate, NoMulti, K1_3, K3_5, K3_7, ResMKGA, NoSE, +PCGrad or plain)");
  }
  c.validate();
  return c;
}

}  // namespace mkga

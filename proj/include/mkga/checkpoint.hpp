#pragma once

// Checkpoint format (little-endian):
//   char[4] "MKGA", u32 version, u32 parameter count, then per parameter:
//   u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u32 rank,
//   u64 dims[rank], raw payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "mkga/data.hpp"
#include "mkga/errors.hpp"
#include "mkga/network.hpp"

namespace mkga {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void save_checkpoint(Module<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open " + path + " for writing");
  auto params = model.parameters();
  os.write("MKGA", 4);
  io::put<std::uint32_t>(os, kCheckpointVersion);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    io::put<std::uint8_t>(os, dtype_tag<T>());
    const auto& shape = p->tensor.shape();
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) io::put<std::uint64_t>(os, d);
    const auto& data = p->tensor.storage();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(T)));
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write failed for " + path);
}

struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<char> payload;
};

/// Reads and structurally validates a checkpoint file.
inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open checkpoint " + path);
  char magic[4];
  io::get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "MKGA", 4) != 0) throw FormatError(FormatError::Kind::kBadMagic, path + " is not a checkpoint (bad magic)");
  const auto version = io::get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "checkpoint version " + std::to_string(version) + " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = io::get<std::uint32_t>(is, "parameter count");
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = io::get<std::uint32_t>(is, "name length");
    if (len == 0 || len > 4096) throw FormatError(FormatError::Kind::kSyntax, "implausible parameter name length " + std::to_string(len));
    e.name.resize(len);
    io::get_bytes(is, e.name.data(), len, "parameter name");
    e.dtype = io::get<std::uint8_t>(is, "dtype of " + e.name);
    if (e.dtype > 1) throw FormatError(FormatError::Kind::kSyntax, "unknown dtype tag for " + e.name);
    const auto rank = io::get<std::uint32_t>(is, "rank of " + e.name);
    if (rank > 8) throw FormatError(FormatError::Kind::kSyntax, "implausible rank for " + e.name);
    std::uint64_t count_elems = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = io::get<std::uint64_t>(is, "dims of " + e.name);
      if (d > (1ull << 32)) throw FormatError(FormatError::Kind::kSyntax, "implausible dimension for " + e.name);
      e.shape.push_back(static_cast<std::size_t>(d));
      count_elems *= d;
    }
    const std::size_t bytes = static_cast<std::size_t>(count_elems) * (e.dtype == 0 ? 4 : 8);
    e.payload.resize(bytes);
    io::get_bytes(is, e.payload.data(), bytes, "payload of " + e.name);
    out.push_back(std::move(e));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(FormatError::Kind::kSyntax, "trailing bytes after last parameter");
  return out;
}

/// Loads a checkpoint into an already-built model, requiring the parameter
/// name sets and shapes to match exactly.
template <typename T>
void load_checkpoint(Module<T>& model, const std::string& path) {
  const auto entries = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries)
    if (!by_name.emplace(e.name, &e).second) throw FormatError(FormatError::Kind::kNameMismatch, "duplicate parameter " + e.name);
  auto params = model.parameters();
  std::map<std::string, Parameter<T>*> expected;
  for (auto* p : params) expected[p->name] = p;
  for (auto* p : params)
    if (!by_name.count(p->name)) throw FormatError(FormatError::Kind::kNameMismatch, "checkpoint is missing parameter " + p->name);
  for (const auto& e : entries)
    if (!expected.count(e.name)) throw FormatError(FormatError::Kind::kNameMismatch, "checkpoint has unexpected parameter " + e.name);
  for (auto* p : params) {
    const auto& e = *by_name.at(p->name);
    if (e.shape != p->tensor.shape()) {
      throw FormatError(FormatError::Kind::kShapeMismatch,
                        "parameter " + p->name + " has shape " + to_string(e.shape) + " in checkpoint, model expects " + to_string(p->tensor.shape()));
    }
  }
  for (auto* p : params) {
    const auto& e = *by_name.at(p->name);
    auto dst = p->tensor.data();
    if (e.dtype == dtype_tag<T>()) {
      std::memcpy(dst.data(), e.payload.data(), e.payload.size());
    } else if (e.dtype == 0) {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        float v;
        std::memcpy(&v, e.payload.data() + 4 * i, 4);
        dst[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        double v;
        std::memcpy(&v, e.payload.data() + 8 * i, 8);
        dst[i] = static_cast<T>(v);
      }
    }
  }
}

/// Builds the configured architecture and loads the checkpoint into it.
template <typename T>
std::unique_ptr<Model<T>> checkpoint_load(const std::string& path, const Backbone& backbone, const AdapterConfig& cfg,
                                          std::size_t image_size = 64) {
  auto model = build_model<T>(backbone, cfg, 0, image_size);
  load_checkpoint(*model, path);
  return model;
}

}  // namespace mkga

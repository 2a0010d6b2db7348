#pragma once

// Binary model container.
//
//   "E2E-SEPSIS-MODEL"            16 bytes
//   format version                u32
//   schema hash                   u64
//   normalization-stats hash      u64
//   append-mask-channels flag     u8
//   layer count L                 u32
//   dims                          (L + 1) x u32
//   hidden dropout_p              f64
//   parameters                    f64 each, layer order, weights row-major then biases
//   checksum                      u64, FNV-1a over every preceding byte
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "sepsis/error.hpp"
#include "sepsis/rng.hpp"
#include "sepsis/tensor_nn.hpp"

namespace sepsis {

inline constexpr std::string_view kModelMagic = "E2E-SEPSIS-MODEL";
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelMetadata {
  std::uint64_t schema_hash = 0;
  std::uint64_t norm_stats_hash = 0;
  bool append_mask_channels = false;
  bool operator==(const ModelMetadata&) const = default;
};

struct LoadedModel {
  Network network;
  ModelMetadata metadata;
};

namespace detail {

class ByteWriter {
 public:
  void raw(std::string_view s) { out_ += s; }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::string& bytes() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error(Errc::CorruptFile, "model file is truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checksum(std::string_view bytes) {
  Fnv1a h;
  h.update(bytes);
  return h.digest();
}

}  // namespace detail

inline std::string serialize_model(const Network& net, const ModelMetadata& meta) {
  net.validate();
  detail::ByteWriter w;
  w.raw(kModelMagic);
  w.u32(kModelFormatVersion);
  w.u64(meta.schema_hash);
  w.u64(meta.norm_stats_hash);
  w.u8(meta.append_mask_channels ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (auto d : net.dims()) w.u32(static_cast<std::uint32_t>(d));
  w.f64(net.layers.size() > 1 ? net.layers.front().dropout_p : 0.0);
  for (const auto& l : net.layers) {
    for (double v : l.weights) w.f64(v);
    for (double v : l.biases) w.f64(v);
  }
  w.u64(detail::checksum(w.bytes()));
  return std::move(w.bytes());
}

/// Parses a model container. When `expected_schema_hash` is given, a model
/// trained on a different feature schema is rejected with VersionMismatch.
inline LoadedModel deserialize_model(std::string_view bytes,
                                     std::optional<std::uint64_t> expected_schema_hash = std::nullopt) {
  detail::ByteReader r(bytes);
  if (r.raw(kModelMagic.size()) != kModelMagic) throw Error(Errc::CorruptFile, "not a model file (bad magic)");
  const auto version = r.u32();
  if (version != kModelFormatVersion) {
    throw Error(Errc::VersionMismatch, fmt::format("model format version {}, expected {}", version, kModelFormatVersion));
  }
  LoadedModel m;
  m.metadata.schema_hash = r.u64();
  m.metadata.norm_stats_hash = r.u64();
  const auto flag = r.u8();
  if (flag > 1) throw Error(Errc::CorruptFile, "bad flag byte");
  m.metadata.append_mask_channels = flag == 1;
  const auto n_layers = r.u32();
  if (n_layers == 0 || n_layers > 64) throw Error(Errc::CorruptFile, "implausible layer count");
  std::vector<std::size_t> dims;
  std::uint64_t n_params = 0;
  for (std::uint32_t i = 0; i <= n_layers; ++i) {
    dims.push_back(r.u32());
    if (dims.back() == 0 || dims.back() > (1u << 20)) throw Error(Errc::CorruptFile, "implausible layer width");
    if (i > 0) n_params += static_cast<std::uint64_t>(dims[i - 1]) * dims[i] + dims[i];
  }
  const double dropout = r.f64();
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(Errc::CorruptFile, "bad dropout value");
  if (r.remaining() != n_params * 8 + 8) {
    throw Error(Errc::CorruptFile, fmt::format("model file has {} payload bytes, expected {}", r.remaining(),
                                               n_params * 8 + 8));
  }
  const std::size_t body_end = bytes.size() - 8;
  {
    detail::ByteReader tail(bytes.substr(body_end));
    if (tail.u64() != detail::checksum(bytes.substr(0, body_end))) {
      throw Error(Errc::ChecksumFail, "model checksum mismatch");
    }
  }
  if (expected_schema_hash && *expected_schema_hash != m.metadata.schema_hash) {
    throw Error(Errc::VersionMismatch,
                fmt::format("model schema hash {:016x} does not match expected {:016x}", m.metadata.schema_hash,
                            *expected_schema_hash));
  }
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    Layer l;
    l.in_dim = dims[k];
    l.out_dim = dims[k + 1];
    const bool last = k + 1 == n_layers;
    l.activation = last ? Activation::Identity : Activation::ReLU;
    l.dropout_p = last ? 0.0 : dropout;
    l.weights.resize(l.in_dim * l.out_dim);
    for (auto& v : l.weights) v = r.f64();
    l.biases.resize(l.out_dim);
    for (auto& v : l.biases) v = r.f64();
    m.network.layers.push_back(std::move(l));
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const Network& net, const ModelMetadata& meta) {
  const auto bytes = serialize_model(net, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

inline LoadedModel load_model(const std::filesystem::path& path,
                              std::optional<std::uint64_t> expected_schema_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes, expected_schema_hash);
}

}  // namespace sepsis

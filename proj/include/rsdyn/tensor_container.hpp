#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rsdyn {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Checkpoint container with the same header discipline as RSD:
/// "RSDT" | version u32 | tensor count u32 | meta_len u32 | meta JSON |
/// per tensor: name_len u32 | name | ndim u32 | dims u32[ndim] | f32 payload.
/// All integers and floats little-endian.
struct TensorBundle {
  std::string metadata_json = "{}";
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const;

  friend bool operator==(const TensorBundle&, const TensorBundle&) = default;
};

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle);
TensorBundle decode_bundle(std::span<const std::uint8_t> bytes);

void write_bundle(const TensorBundle& bundle, const std::filesystem::path& path);
TensorBundle read_bundle(const std::filesystem::path& path);

}  // namespace rsdyn

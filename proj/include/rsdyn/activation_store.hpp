#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rsdyn {

enum class HookPoint : std::uint8_t { PreAttn, PreMLP };

/// WithinLayer: pre-attention to pre-MLP of the same layer.
/// CrossLayer: pre-MLP of layer l to pre-attention of layer l+1.
enum class Transition : std::uint8_t { WithinLayer, CrossLayer };

const char* to_string(HookPoint hook);
const char* to_string(Transition transition);

struct SublayerLabel {
  int layer = 0;
  HookPoint hook = HookPoint::PreAttn;

  friend bool operator==(const SublayerLabel&, const SublayerLabel&) = default;
};

/// Labels produced by the alternation rule: (0,PreAttn), (0,PreMLP), (1,PreAttn), ...
std::vector<SublayerLabel> alternating_labels(std::size_t sublayers);

/// Residual-stream activations, samples x sublayers x units, stored as f32 in
/// sample-major, then sublayer, then unit order. Construction does not
/// validate; use validate() to check the invariants.
class RSTensor {
 public:
  RSTensor() = default;
  /// Zero tensor with alternating labels.
  RSTensor(std::size_t samples, std::size_t sublayers, std::size_t units);
  RSTensor(std::size_t samples, std::size_t sublayers, std::size_t units, std::vector<float> data,
           std::vector<SublayerLabel> labels);

  std::size_t samples() const { return samples_; }
  std::size_t sublayers() const { return sublayers_; }
  std::size_t units() const { return units_; }
  std::size_t layers() const { return sublayers_ / 2; }

  float at(std::size_t b, std::size_t s, std::size_t u) const { return data_[index(b, s, u)]; }
  float& at(std::size_t b, std::size_t s, std::size_t u) { return data_[index(b, s, u)]; }

  /// The D-vector captured for sample b at sublayer s.
  std::span<const float> row(std::size_t b, std::size_t s) const {
    return {data_.data() + index(b, s, 0), units_};
  }
  std::span<float> row(std::size_t b, std::size_t s) { return {data_.data() + index(b, s, 0), units_}; }

  std::span<const float> data() const { return data_; }
  const std::vector<SublayerLabel>& labels() const { return labels_; }

  /// Kind of the transition from sublayer s to s+1, read from the labels.
  Transition transition(std::size_t s) const;

  friend bool operator==(const RSTensor&, const RSTensor&) = default;

 private:
  std::size_t index(std::size_t b, std::size_t s, std::size_t u) const {
    return (b * sublayers_ + s) * units_ + u;
  }

  std::size_t samples_ = 0;
  std::size_t sublayers_ = 0;
  std::size_t units_ = 0;
  std::vector<float> data_;
  std::vector<SublayerLabel> labels_;
};

/// Stack single-sample slices (1 x S x D) into one B x S x D tensor.
RSTensor stack_samples(std::span<const RSTensor> slices);

struct RsdMetadata {
  std::string model_name;
  std::string dataset_name;
  std::string token_position = "last";
  std::optional<std::int64_t> seed;
  std::map<std::string, std::string> params;

  friend bool operator==(const RsdMetadata&, const RsdMetadata&) = default;
};

struct ValidationReport {
  std::vector<std::string> violations;

  bool ok() const { return violations.empty(); }
  bool mentions(const std::string& needle) const;
};

ValidationReport validate(const RSTensor& tensor);
ValidationReport validate(const RsdMetadata& meta);

/// RSD1 container: "RSD1" | version u32 | B u32 | S u32 | D u32 | meta_len u32 |
/// meta JSON | B*S*D f32, all little-endian.
std::vector<std::uint8_t> encode_rsd(const RSTensor& tensor, const RsdMetadata& meta);
std::pair<RSTensor, RsdMetadata> decode_rsd(std::span<const std::uint8_t> bytes);

void write_rsd(const RSTensor& tensor, const RsdMetadata& meta, const std::filesystem::path& path);
std::pair<RSTensor, RsdMetadata> read_rsd(const std::filesystem::path& path);

// Shared by the RSD and checkpoint containers.
namespace le {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::uint32_t get_u32(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);
}  // namespace le

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace rsdyn

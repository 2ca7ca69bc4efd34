#include "rsdyn/activation_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "rsdyn/error.hpp"

namespace rsdyn {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'D', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 24;

}  // namespace

const char* to_string(HookPoint hook) { return hook == HookPoint::PreAttn ? "PreAttn" : "PreMLP"; }

const char* to_string(Transition transition) {
  return transition == Transition::WithinLayer ? "WithinLayer" : "CrossLayer";
}

std::vector<SublayerLabel> alternating_labels(std::size_t sublayers) {
  std::vector<SublayerLabel> labels(sublayers);
  for (std::size_t s = 0; s < sublayers; ++s) {
    labels[s] = {static_cast<int>(s / 2), s % 2 == 0 ? HookPoint::PreAttn : HookPoint::PreMLP};
  }
  return labels;
}

RSTensor::RSTensor(std::size_t samples, std::size_t sublayers, std::size_t units)
    : samples_(samples),
      sublayers_(sublayers),
      units_(units),
      data_(samples * sublayers * units, 0.0f),
      labels_(alternating_labels(sublayers)) {}

RSTensor::RSTensor(std::size_t samples, std::size_t sublayers, std::size_t units, std::vector<float> data,
                   std::vector<SublayerLabel> labels)
    : samples_(samples),
      sublayers_(sublayers),
      units_(units),
      data_(std::move(data)),
      labels_(std::move(labels)) {}

Transition RSTensor::transition(std::size_t s) const {
  return labels_.at(s).hook == HookPoint::PreAttn ? Transition::WithinLayer : Transition::CrossLayer;
}

RSTensor stack_samples(std::span<const RSTensor> slices) {
  if (slices.empty()) throw Error(ErrorKind::EmptyInput, "no slices to stack");
  const std::size_t s = slices.front().sublayers();
  const std::size_t d = slices.front().units();
  std::vector<float> data;
  data.reserve(slices.size() * s * d);
  for (const auto& slice : slices) {
    if (slice.sublayers() != s || slice.units() != d) {
      throw Error(ErrorKind::DimensionMismatch, "slice shapes differ");
    }
    data.insert(data.end(), slice.data().begin(), slice.data().end());
  }
  const std::size_t total = data.size() / (s * d);
  return RSTensor(total, s, d, std::move(data), slices.front().labels());
}

bool ValidationReport::mentions(const std::string& needle) const {
  for (const auto& v : violations) {
    if (v.find(needle) != std::string::npos) return true;
  }
  return false;
}

ValidationReport validate(const RSTensor& t) {
  ValidationReport report;
  auto& v = report.violations;
  if (t.samples() < 1) v.emplace_back("sample count must be at least 1");
  if (t.units() < 1) v.emplace_back("unit count must be at least 1");
  if (t.sublayers() == 0) v.emplace_back("sublayer count is zero");
  if (t.sublayers() % 2 != 0) v.emplace_back("sublayer count not even");

  if (t.labels().size() != t.sublayers()) {
    v.emplace_back("label count mismatch: " + std::to_string(t.labels().size()) + " labels for " +
                   std::to_string(t.sublayers()) + " sublayers");
  } else {
    const auto expected = alternating_labels(t.sublayers());
    for (std::size_t s = 0; s < expected.size(); ++s) {
      if (t.labels()[s] != expected[s]) {
        v.emplace_back("label order violation at sublayer " + std::to_string(s));
        break;
      }
    }
  }

  const auto expected_size = static_cast<unsigned long long>(t.samples()) * t.sublayers() * t.units();
  if (t.data().size() != expected_size) {
    v.emplace_back("data size mismatch: " + std::to_string(t.data().size()) + " values, expected " +
                   std::to_string(expected_size));
    return report;
  }

  std::size_t non_finite = 0;
  std::size_t first_bad = 0;
  const auto data = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      if (non_finite == 0) first_bad = i;
      ++non_finite;
    }
  }
  if (non_finite > 0) {
    const std::size_t per_sample = t.sublayers() * t.units();
    v.emplace_back("non-finite values: " + std::to_string(non_finite) + ", first at (" +
                   std::to_string(first_bad / per_sample) + ", " +
                   std::to_string(first_bad % per_sample / t.units()) + ", " +
                   std::to_string(first_bad % t.units()) + ")");
  }
  return report;
}

ValidationReport validate(const RsdMetadata& meta) {
  ValidationReport report;
  if (meta.model_name.empty()) report.violations.emplace_back("model_name is empty");
  if (meta.dataset_name.empty()) report.violations.emplace_back("dataset_name is empty");
  return report;
}

namespace le {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace le

namespace {

std::string metadata_json(const RsdMetadata& meta) {
  nlohmann::json j;
  j["model_name"] = meta.model_name;
  j["dataset_name"] = meta.dataset_name;
  j["token_position"] = meta.token_position;
  if (meta.seed) j["seed"] = *meta.seed;
  j["params"] = nlohmann::json::object();
  for (const auto& [k, val] : meta.params) j["params"][k] = val;
  return j.dump();
}

RsdMetadata parse_metadata(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("metadata is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Format, "metadata must be a JSON object");

  auto get_string = [&](const char* key, bool required) -> std::string {
    if (!j.contains(key)) {
      if (required) throw Error(ErrorKind::Format, std::string("metadata missing '") + key + "'");
      return {};
    }
    if (!j[key].is_string()) throw Error(ErrorKind::Format, std::string("metadata '") + key + "' not a string");
    return j[key].get<std::string>();
  };

  RsdMetadata meta;
  meta.model_name = get_string("model_name", true);
  meta.dataset_name = get_string("dataset_name", true);
  meta.token_position = get_string("token_position", true);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_integer()) throw Error(ErrorKind::Format, "metadata 'seed' not an integer");
    meta.seed = j["seed"].get<std::int64_t>();
  }
  if (j.contains("params")) {
    if (!j["params"].is_object()) throw Error(ErrorKind::Format, "metadata 'params' not an object");
    for (const auto& [k, val] : j["params"].items()) {
      if (!val.is_string()) throw Error(ErrorKind::Format, "metadata param '" + k + "' not a string");
      meta.params[k] = val.get<std::string>();
    }
  }
  if (const auto report = validate(meta); !report.ok()) {
    throw Error(ErrorKind::Format, report.violations.front());
  }
  return meta;
}

void require_valid(const RSTensor& tensor, const RsdMetadata& meta) {
  auto report = validate(tensor);
  const auto meta_report = validate(meta);
  report.violations.insert(report.violations.end(), meta_report.violations.begin(),
                           meta_report.violations.end());
  if (!report.ok()) throw Error(ErrorKind::InvariantViolation, report.violations.front());
  constexpr auto kMax = std::numeric_limits<std::uint32_t>::max();
  if (tensor.samples() > kMax || tensor.sublayers() > kMax || tensor.units() > kMax) {
    throw Error(ErrorKind::InvariantViolation, "dimension exceeds u32 range");
  }
}

}  // namespace

std::vector<std::uint8_t> encode_rsd(const RSTensor& tensor, const RsdMetadata& meta) {
  require_valid(tensor, meta);
  const std::string json = metadata_json(meta);
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + json.size() + 4 * tensor.data().size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  le::put_u32(out, kVersion);
  le::put_u32(out, static_cast<std::uint32_t>(tensor.samples()));
  le::put_u32(out, static_cast<std::uint32_t>(tensor.sublayers()));
  le::put_u32(out, static_cast<std::uint32_t>(tensor.units()));
  le::put_u32(out, static_cast<std::uint32_t>(json.size()));
  out.insert(out.end(), json.begin(), json.end());
  for (const float v : tensor.data()) le::put_f32(out, v);
  return out;
}

std::pair<RSTensor, RsdMetadata> decode_rsd(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes) throw Error(ErrorKind::Format, "file shorter than RSD header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorKind::Format, "bad magic bytes");
  const std::uint8_t* p = bytes.data();
  const std::uint32_t version = le::get_u32(p + 4);
  if (version != kVersion) throw Error(ErrorKind::Format, "unsupported version " + std::to_string(version));
  const std::uint64_t b = le::get_u32(p + 8);
  const std::uint64_t s = le::get_u32(p + 12);
  const std::uint64_t d = le::get_u32(p + 16);
  const std::uint64_t meta_len = le::get_u32(p + 20);
  if (b == 0 || s == 0 || d == 0) throw Error(ErrorKind::Format, "zero dimension in header");

  const std::uint64_t available = bytes.size() - kHeaderBytes;
  if (meta_len > available) throw Error(ErrorKind::Format, "truncated metadata");
  // Three u32 factors fit in 96 bits; reject before the product can overflow.
  const unsigned __int128 payload_bytes = static_cast<unsigned __int128>(b) * s * d * 4;
  if (payload_bytes > available - meta_len) throw Error(ErrorKind::Format, "truncated payload");
  if (payload_bytes < available - meta_len) throw Error(ErrorKind::Format, "trailing bytes after payload");

  const std::string_view json(reinterpret_cast<const char*>(p + kHeaderBytes), meta_len);
  RsdMetadata meta = parse_metadata(json);

  const std::size_t count = static_cast<std::size_t>(b * s * d);
  std::vector<float> data(count);
  const std::uint8_t* payload = p + kHeaderBytes + meta_len;
  for (std::size_t i = 0; i < count; ++i) data[i] = le::get_f32(payload + 4 * i);

  RSTensor tensor(b, s, d, std::move(data), alternating_labels(s));
  if (const auto report = validate(tensor); !report.ok()) {
    if (report.mentions("not even")) throw Error(ErrorKind::Format, report.violations.front());
    throw Error(ErrorKind::InvariantViolation, report.violations.front());
  }
  return {std::move(tensor), std::move(meta)};
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorKind::Io, "read failed for " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

void write_rsd(const RSTensor& tensor, const RsdMetadata& meta, const std::filesystem::path& path) {
  write_file_bytes(path, encode_rsd(tensor, meta));
}

std::pair<RSTensor, RsdMetadata> read_rsd(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::Io, "no such file: " + path.string());
  return decode_rsd(read_file_bytes(path));
}

}  // namespace rsdyn

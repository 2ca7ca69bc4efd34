#include "rsdyn/tensor_container.hpp"

#include <cstring>

#include "rsdyn/activation_store.hpp"
#include "rsdyn/error.hpp"

namespace rsdyn {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  const std::uint8_t* take(std::uint64_t n) {
    if (n > bytes_.size() - pos_) throw Error(ErrorKind::Format, "truncated checkpoint");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += static_cast<std::size_t>(n);
    return p;
  }
  std::uint32_t u32() { return le::get_u32(take(4)); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor& TensorBundle::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::Format, "checkpoint has no tensor '" + name + "'");
}

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  le::put_u32(out, kVersion);
  le::put_u32(out, static_cast<std::uint32_t>(bundle.tensors.size()));
  le::put_u32(out, static_cast<std::uint32_t>(bundle.metadata_json.size()));
  out.insert(out.end(), bundle.metadata_json.begin(), bundle.metadata_json.end());
  for (const auto& t : bundle.tensors) {
    std::uint64_t count = 1;
    for (const auto d : t.shape) count *= d;
    if (count != t.values.size()) {
      throw Error(ErrorKind::InvariantViolation, "tensor '" + t.name + "' shape does not match its values");
    }
    le::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    le::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (const auto d : t.shape) le::put_u32(out, d);
    for (const float v : t.values) le::put_f32(out, v);
  }
  return out;
}

TensorBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), kMagic, 4) != 0) throw Error(ErrorKind::Format, "bad checkpoint magic");
  if (const auto v = r.u32(); v != kVersion) {
    throw Error(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(v));
  }
  const std::uint32_t count = r.u32();
  const std::uint32_t meta_len = r.u32();
  TensorBundle bundle;
  const auto* meta = r.take(meta_len);
  bundle.metadata_json.assign(reinterpret_cast<const char*>(meta), meta_len);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = r.u32();
    const auto* name = r.take(name_len);
    t.name.assign(reinterpret_cast<const char*>(name), name_len);
    const std::uint32_t ndim = r.u32();
    if (ndim > 8) throw Error(ErrorKind::Format, "tensor rank too large");
    std::uint64_t elems = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      t.shape.push_back(r.u32());
      elems *= t.shape.back();
      if (elems > (std::uint64_t{1} << 40)) throw Error(ErrorKind::Format, "tensor too large");
    }
    const auto* payload = r.take(elems * 4);
    t.values.resize(static_cast<std::size_t>(elems));
    for (std::size_t e = 0; e < t.values.size(); ++e) t.values[e] = le::get_f32(payload + 4 * e);
    bundle.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw Error(ErrorKind::Format, "trailing bytes after checkpoint");
  return bundle;
}

void write_bundle(const TensorBundle& bundle, const std::filesystem::path& path) {
  write_file_bytes(path, encode_bundle(bundle));
}

TensorBundle read_bundle(const std::filesystem::path& path) { return decode_bundle(read_file_bytes(path)); }

}  // namespace rsdyn

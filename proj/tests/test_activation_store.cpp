#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "oracles.hpp"
#include "rsdyn/activation_store.hpp"
#include "rsdyn/tensor_container.hpp"
#include "rsdyn/toy_transformer.hpp"
#include "test_util.hpp"

using namespace rsdyn;

namespace {

RsdMetadata meta_for(const std::string& model = "toy") {
  RsdMetadata m;
  m.model_name = model;
  m.dataset_name = "unit-test";
  m.seed = 42;
  m.params["k"] = "v";
  return m;
}

std::vector<std::uint8_t> file_bytes(const RSTensor& t) { return encode_rsd(t, meta_for()); }

}  // namespace

TEST_CASE("labels alternate and transitions follow them") {
  const auto labels = alternating_labels(6);
  REQUIRE(labels.size() == 6);
  CHECK(labels[0] == SublayerLabel{0, HookPoint::PreAttn});
  CHECK(labels[1] == SublayerLabel{0, HookPoint::PreMLP});
  CHECK(labels[4] == SublayerLabel{2, HookPoint::PreAttn});
  RSTensor t(1, 6, 2);
  CHECK(t.transition(0) == Transition::WithinLayer);
  CHECK(t.transition(1) == Transition::CrossLayer);
  CHECK(t.transition(4) == Transition::WithinLayer);
}

TEST_CASE("zero tensor 1x2x3 writes header plus 24 payload bytes") {
  const RSTensor t(1, 2, 3);
  const auto bytes = file_bytes(t);
  const std::uint32_t meta_len = le::get_u32(bytes.data() + 20);
  CHECK(bytes.size() == 24 + meta_len + 24);
  CHECK(std::memcmp(bytes.data(), "RSD1", 4) == 0);
  CHECK(le::get_u32(bytes.data() + 4) == 1);
  CHECK(le::get_u32(bytes.data() + 8) == 1);
  CHECK(le::get_u32(bytes.data() + 12) == 2);
  CHECK(le::get_u32(bytes.data() + 16) == 3);
  const auto [back, meta] = decode_rsd(bytes);
  CHECK(back == t);
  CHECK(meta == meta_for());
}

TEST_CASE("write then read round-trips through the filesystem") {
  const auto dir = scratch_dir("store_roundtrip");
  const auto t = oracle::random_tensor(3, 4, 5, 11);
  write_rsd(t, meta_for(), dir / "a.rsd");
  const auto [back, meta] = read_rsd(dir / "a.rsd");
  CHECK(back == t);
  CHECK(meta == meta_for());
}

TEST_CASE("property: random valid tensors round-trip bit-exactly") {
  oracle::Gauss g(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + static_cast<std::size_t>(g.uniform() * 4);
    const std::size_t s = 2 * (1 + static_cast<std::size_t>(g.uniform() * 4));
    const std::size_t d = 1 + static_cast<std::size_t>(g.uniform() * 9);
    auto t = oracle::random_tensor(b, s, d, 1000 + trial, std::pow(10.0, g.uniform() * 20 - 10));
    // Include signed zeros and denormals.
    t.at(0, 0, 0) = -0.0f;
    if (d > 1) t.at(0, 0, 1) = std::numeric_limits<float>::denorm_min();
    const auto bytes = file_bytes(t);
    const auto [back, meta] = decode_rsd(bytes);
    REQUIRE(back.data().size() == t.data().size());
    CHECK(std::memcmp(back.data().data(), t.data().data(), 4 * t.data().size()) == 0);
    CHECK(encode_rsd(back, meta) == bytes);
  }
}

TEST_CASE("golden file from an independent writer parses identically") {
  const auto path = std::filesystem::path(RSDYN_TEST_DATA) / "golden.rsd";
  const auto [t, meta] = read_rsd(path);
  REQUIRE(t.samples() == 2);
  REQUIRE(t.sublayers() == 4);
  REQUIRE(t.units() == 3);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t u = 0; u < 3; ++u) {
        const double expected = static_cast<double>(b * 12 + s * 3 + u) * 0.25 - 2.5;
        CHECK(t.at(b, s, u) == expected);
      }
    }
  }
  CHECK(meta.model_name == "python-writer");
  CHECK(meta.dataset_name == "golden");
  CHECK(meta.token_position == "last");
  CHECK(meta.seed == 7);
  CHECK(meta.params.at("unicode") == "\xC3\xA9\xE4\xB8\xAD");
  // Our encoder reproduces the file byte for byte.
  CHECK(encode_rsd(t, meta) == read_file_bytes(path));
}

TEST_CASE("validate reports violations as data") {
  CHECK(validate(RSTensor(2, 4, 3)).ok());

  const RSTensor odd(1, 3, 2);
  CHECK(validate(odd).mentions("sublayer count not even"));

  auto labels = alternating_labels(4);
  std::swap(labels[0], labels[1]);
  const RSTensor bad_order(1, 4, 2, std::vector<float>(8, 0.0f), labels);
  CHECK(validate(bad_order).mentions("label order violation"));

  RSTensor with_nan(1, 2, 2);
  with_nan.at(0, 1, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK(validate(with_nan).mentions("non-finite"));

  const RSTensor short_data(1, 2, 2, std::vector<float>(3, 0.0f), alternating_labels(2));
  CHECK_FALSE(validate(short_data).ok());

  const RSTensor empty;
  CHECK_FALSE(validate(empty).ok());
}

TEST_CASE("write rejects invalid tensors and metadata") {
  const auto dir = scratch_dir("store_invalid");
  RSTensor t(1, 2, 2);
  t.at(0, 0, 0) = std::numeric_limits<float>::infinity();
  CHECK_ERROR_KIND(write_rsd(t, meta_for(), dir / "x.rsd"), ErrorKind::InvariantViolation);
  CHECK_ERROR_KIND(write_rsd(RSTensor(1, 2, 2), meta_for(""), dir / "y.rsd"), ErrorKind::InvariantViolation);
  CHECK_ERROR_KIND(write_rsd(RSTensor(1, 2, 2), meta_for(), dir / "missing" / "z.rsd"), ErrorKind::Io);
  CHECK_ERROR_KIND(read_rsd(dir / "nope.rsd"), ErrorKind::Io);
}

TEST_CASE("malformed files are rejected") {
  const auto good = file_bytes(oracle::random_tensor(2, 4, 3, 3));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_ERROR_KIND(decode_rsd(bad_magic), ErrorKind::Format);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK_ERROR_KIND(decode_rsd(bad_version), ErrorKind::Format);

  auto truncated = good;
  truncated.resize(truncated.size() - 4);
  CHECK_ERROR_KIND(decode_rsd(truncated), ErrorKind::Format);

  auto trailing = good;
  trailing.push_back(0);
  CHECK_ERROR_KIND(decode_rsd(trailing), ErrorKind::Format);

  auto huge_dims = good;
  huge_dims[8] = 0xff;
  huge_dims[9] = 0xff;
  huge_dims[10] = 0xff;
  huge_dims[11] = 0xff;
  CHECK_ERROR_KIND(decode_rsd(huge_dims), ErrorKind::Format);

  auto zero_dim = good;
  std::memset(zero_dim.data() + 16, 0, 4);
  CHECK_ERROR_KIND(decode_rsd(zero_dim), ErrorKind::Format);

  auto bad_json = good;
  bad_json[24] = '[';
  CHECK_ERROR_KIND(decode_rsd(bad_json), ErrorKind::Format);

  CHECK_ERROR_KIND(decode_rsd(std::vector<std::uint8_t>{'R', 'S', 'D'}), ErrorKind::Format);

  // Odd sublayer count in the header.
  std::vector<std::uint8_t> odd = good;
  const std::uint32_t meta_len = le::get_u32(good.data() + 20);
  odd.resize(24 + meta_len);
  odd[12] = 3;
  for (int i = 0; i < 2 * 3 * 3; ++i) le::put_f32(odd, 0.0f);
  CHECK_ERROR_KIND(decode_rsd(odd), ErrorKind::Format);

  // NaN payload.
  auto nan_payload = good;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan_payload.data() + nan_payload.size() - 4, &nan, 4);
  CHECK_ERROR_KIND(decode_rsd(nan_payload), ErrorKind::InvariantViolation);
}

TEST_CASE("property: decode never crashes on corrupted bytes") {
  const auto good = file_bytes(oracle::random_tensor(2, 2, 3, 9));
  oracle::Gauss g(77);
  for (int trial = 0; trial < 2000; ++trial) {
    auto bytes = good;
    const int flips = 1 + static_cast<int>(g.uniform() * 4);
    for (int f = 0; f < flips; ++f) {
      bytes[static_cast<std::size_t>(g.uniform() * static_cast<double>(bytes.size()))] =
          static_cast<std::uint8_t>(g.uniform() * 256);
    }
    if (g.uniform() < 0.3) bytes.resize(static_cast<std::size_t>(g.uniform() * static_cast<double>(bytes.size())));
    try {
      const auto [t, meta] = decode_rsd(bytes);
      CHECK(validate(t).ok());
    } catch (const Error& e) {
      CHECK((e.kind() == ErrorKind::Format || e.kind() == ErrorKind::InvariantViolation));
    }
  }
}

TEST_CASE("stack_samples concatenates slices") {
  const auto a = oracle::random_tensor(1, 4, 3, 1);
  const auto b = oracle::random_tensor(1, 4, 3, 2);
  const std::vector<RSTensor> slices{a, b};
  const auto t = stack_samples(slices);
  CHECK(t.samples() == 2);
  CHECK(t.at(1, 2, 1) == b.at(0, 2, 1));
  CHECK(t.at(0, 3, 2) == a.at(0, 3, 2));
  const std::vector<RSTensor> mismatched{a, oracle::random_tensor(1, 2, 3, 3)};
  CHECK_ERROR_KIND(stack_samples(mismatched), ErrorKind::DimensionMismatch);
}

TEST_CASE("tensor bundle round-trips and rejects corruption") {
  TensorBundle bundle;
  bundle.metadata_json = R"({"kind":"test"})";
  bundle.tensors.push_back({"w", {2, 3}, {1, 2, 3, 4, 5, 6}});
  bundle.tensors.push_back({"b", {3}, {-1, 0.5f, 7}});
  const auto bytes = encode_bundle(bundle);
  CHECK(decode_bundle(bytes) == bundle);
  CHECK(bundle.get("b").values[1] == 0.5f);
  CHECK_THROWS(bundle.get("missing"));
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_ERROR_KIND(decode_bundle(truncated), ErrorKind::Format);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_ERROR_KIND(decode_bundle(bad), ErrorKind::Format);
}

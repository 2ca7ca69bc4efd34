#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rsdyn {

inline constexpr int kByteVocab = 256;
inline constexpr int kBosId = 256;

struct TokenSequence {
  std::vector<int> tokens;
  int bos_id = kBosId;

  std::size_t size() const { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Length bounds in characters (Unicode scalar values), both exclusive.
struct FilterSpec {
  std::size_t l_min = 100;
  std::size_t l_max = 500;
};

/// Number of Unicode scalar values in a UTF-8 string (continuation bytes are
/// not counted).
std::size_t char_length(std::string_view s);

std::vector<std::string> filter_sequences(const std::vector<std::string>& corpus, const FilterSpec& spec);

/// [bos_id] followed by the UTF-8 bytes of s as ids 0..255.
TokenSequence tokenize_bytes(std::string_view s, int bos_id = kBosId);

/// Seeded uniform permutation of tokens[1..]; token 0 stays in place.
TokenSequence shuffle_tokens(const TokenSequence& seq, std::uint64_t seed);

/// One sequence per line; a trailing '\r' is stripped, empty lines kept.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

/// Deterministic pseudo-English lines for demos and the toy training loop.
/// Line lengths land mostly inside the default (100, 500) filter window.
std::vector<std::string> synthetic_corpus(std::size_t lines, std::uint64_t seed);

}  // namespace rsdyn

#include "rsdyn/sequence_pipeline.hpp"

#include <array>
#include <fstream>
#include <span>

#include "rsdyn/error.hpp"
#include "rsdyn/rng.hpp"

namespace rsdyn {

std::size_t char_length(std::string_view s) {
  std::size_t n = 0;
  for (const char c : s) {
    if ((static_cast<unsigned char>(c) & 0xC0) != 0x80) ++n;
  }
  return n;
}

std::vector<std::string> filter_sequences(const std::vector<std::string>& corpus, const FilterSpec& spec) {
  if (spec.l_min >= spec.l_max) throw Error(ErrorKind::Config, "filter requires l_min < l_max");
  std::vector<std::string> out;
  for (const auto& s : corpus) {
    const std::size_t n = char_length(s);
    if (spec.l_min < n && n < spec.l_max) out.push_back(s);
  }
  return out;
}

TokenSequence tokenize_bytes(std::string_view s, int bos_id) {
  if (s.empty()) throw Error(ErrorKind::EmptyInput, "cannot tokenize an empty string");
  TokenSequence seq;
  seq.bos_id = bos_id;
  seq.tokens.reserve(s.size() + 1);
  seq.tokens.push_back(bos_id);
  for (const char c : s) seq.tokens.push_back(static_cast<unsigned char>(c));
  return seq;
}

TokenSequence shuffle_tokens(const TokenSequence& seq, std::uint64_t seed) {
  TokenSequence out = seq;
  if (out.tokens.size() > 2) {
    Rng rng(seed);
    rng.shuffle(std::span<int>(out.tokens).subspan(1));
  }
  return out;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open corpus " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (in.bad()) throw Error(ErrorKind::Io, "read failed for corpus " + path.string());
  return lines;
}

std::vector<std::string> synthetic_corpus(std::size_t lines, std::uint64_t seed) {
  static constexpr std::array<std::string_view, 16> kSubjects = {
      "the river", "a small town", "the old bridge", "the committee", "her brother", "the league",
      "the railway", "an early album", "the garrison", "the northern coast", "the museum", "his father",
      "the cathedral", "the second season", "a local newspaper", "the island"};
  static constexpr std::array<std::string_view, 16> kVerbs = {
      "was built", "remained", "was described", "became", "was renamed", "moved", "was released",
      "grew", "was destroyed", "returned", "was founded", "appeared", "was restored", "declined",
      "was extended", "opened"};
  static constexpr std::array<std::string_view, 16> kTails = {
      "in the late nineteenth century", "after the war", "during the winter of that year",
      "near the eastern border", "under the new government", "with the support of the council",
      "for several decades", "before the end of the season", "along the main road",
      "despite strong opposition", "as part of a larger plan", "in the following spring",
      "at the request of the king", "without much public notice", "by the local authorities",
      "over the next few years"};
  static constexpr std::array<std::string_view, 6> kJoins = {", and ", ", while ", "; later ", ", but ",
                                                             ", so ", ", although "};

  Rng rng(seed);
  auto pick = [&](auto const& list) { return list[rng.below(list.size())]; };
  std::vector<std::string> out;
  out.reserve(lines);
  for (std::size_t i = 0; i < lines; ++i) {
    std::string line;
    const std::size_t clauses = 2 + rng.below(5);
    for (std::size_t c = 0; c < clauses; ++c) {
      std::string clause = std::string(pick(kSubjects)) + " " + std::string(pick(kVerbs)) + " " +
                           std::string(pick(kTails));
      if (c == 0) {
        clause[0] = static_cast<char>(clause[0] - 'a' + 'A');
      } else {
        line += pick(kJoins);
      }
      line += clause;
    }
    line += '.';
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace rsdyn

#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "oracles.hpp"
#include "rsdyn/sequence_pipeline.hpp"
#include "test_util.hpp"

using namespace rsdyn;

TEST_CASE("filter keeps strictly bounded lengths in order") {
  const std::vector<std::string> corpus{"ab", std::string(200, 'a'), std::string(600, 'a')};
  const auto kept = filter_sequences(corpus, FilterSpec{100, 500});
  REQUIRE(kept.size() == 1);
  CHECK(kept[0] == std::string(200, 'a'));

  CHECK(filter_sequences({std::string(100, 'x')}, FilterSpec{}).empty());
  CHECK(filter_sequences({std::string(500, 'x')}, FilterSpec{}).empty());
  CHECK(filter_sequences({std::string(101, 'x')}, FilterSpec{}).size() == 1);
  CHECK(filter_sequences({}, FilterSpec{}).empty());
  CHECK_ERROR_KIND(filter_sequences({}, FilterSpec{5, 5}), ErrorKind::Config);
}

TEST_CASE("filter counts characters, not bytes") {
  std::string s;
  for (int i = 0; i < 60; ++i) s += "\xC3\xA9";  // 60 chars, 120 bytes
  CHECK(char_length(s) == 60);
  CHECK(filter_sequences({s}, FilterSpec{50, 100}).size() == 1);
  CHECK(filter_sequences({s}, FilterSpec{100, 200}).empty());
}

TEST_CASE("property: filtering is idempotent") {
  const auto corpus = synthetic_corpus(200, 3);
  const auto once = filter_sequences(corpus, FilterSpec{});
  CHECK(filter_sequences(once, FilterSpec{}) == once);
  CHECK(!once.empty());
}

TEST_CASE("byte tokenizer") {
  CHECK(tokenize_bytes("A").tokens == std::vector<int>{256, 65});
  CHECK(tokenize_bytes("ab").tokens == std::vector<int>{256, 97, 98});
  CHECK(tokenize_bytes("\xC3\xA9").tokens == std::vector<int>{256, 0xC3, 0xA9});
  CHECK(tokenize_bytes("A").bos_id == kBosId);
  CHECK_ERROR_KIND(tokenize_bytes(""), ErrorKind::EmptyInput);
}

TEST_CASE("shuffle keeps BOS and the token multiset") {
  const TokenSequence single{{256, 7}};
  for (std::uint64_t seed = 0; seed < 5; ++seed) CHECK(shuffle_tokens(single, seed) == single);

  const TokenSequence seq{{256, 1, 2, 3}};
  auto out = shuffle_tokens(seq, 9);
  CHECK(out.tokens[0] == 256);
  std::vector<int> rest(out.tokens.begin() + 1, out.tokens.end());
  std::sort(rest.begin(), rest.end());
  CHECK(rest == std::vector<int>{1, 2, 3});
  CHECK(shuffle_tokens(seq, 9) == out);
}

TEST_CASE("property: shuffle over random sequences") {
  oracle::Gauss g(21);
  bool any_moved = false;
  for (int trial = 0; trial < 300; ++trial) {
    TokenSequence seq;
    seq.tokens.push_back(kBosId);
    const int n = 1 + static_cast<int>(g.uniform() * 40);
    for (int i = 0; i < n; ++i) seq.tokens.push_back(static_cast<int>(g.uniform() * 256));
    const auto out = shuffle_tokens(seq, static_cast<std::uint64_t>(trial));
    REQUIRE(out.tokens.size() == seq.tokens.size());
    CHECK(out.tokens[0] == kBosId);
    auto a = seq.tokens, b = out.tokens;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    any_moved = any_moved || out.tokens != seq.tokens;
  }
  CHECK(any_moved);
}

TEST_CASE("shuffle positions are roughly uniform") {
  // Token 1 of [BOS, 1, 2, 3, 4] should land in each of 4 slots ~1/4 of the time.
  const TokenSequence seq{{256, 1, 2, 3, 4}};
  std::vector<int> hits(5, 0);
  const int trials = 8000;
  for (int t = 0; t < trials; ++t) {
    const auto out = shuffle_tokens(seq, static_cast<std::uint64_t>(t));
    hits[static_cast<std::size_t>(std::find(out.tokens.begin(), out.tokens.end(), 1) - out.tokens.begin())]++;
  }
  CHECK(hits[0] == 0);
  for (int i = 1; i < 5; ++i) CHECK(std::abs(hits[static_cast<std::size_t>(i)] - trials / 4) < 200);
}

TEST_CASE("corpus reader") {
  const auto dir = scratch_dir("corpus");
  {
    std::ofstream f(dir / "c.txt", std::ios::binary);
    f << "first line\r\nsecond\n\nlast";
  }
  const auto lines = read_corpus(dir / "c.txt");
  CHECK(lines == std::vector<std::string>{"first line", "second", "", "last"});
  CHECK_ERROR_KIND(read_corpus(dir / "missing.txt"), ErrorKind::Io);
}

TEST_CASE("synthetic corpus is deterministic") {
  CHECK(synthetic_corpus(20, 1) == synthetic_corpus(20, 1));
  CHECK(synthetic_corpus(20, 1) != synthetic_corpus(20, 2));
}

#include <random>
#include <sstream>

#include "catalog.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "token_trie.hpp"

using namespace msl;

namespace {

constexpr TokenId kEnd = 3;

// The Fig.-1 style family: shared "iron man" prefix with different endings.
std::vector<TokenSeq> iron_man() {
  return {{10, 11, kEnd}, {10, 11, 12, kEnd}, {10, 11, 13, kEnd}, {14, kEnd}};
}

}  // namespace

TEST_CASE("valid_next on a shared-prefix family") {
  auto t = TokenTrie::build(iron_man(), kEnd);
  CHECK(t.item_count() == 4);
  CHECK(t.valid_next(TokenSeq{}) == std::vector<TokenId>{10, 14});
  CHECK(t.valid_next(TokenSeq{10}) == std::vector<TokenId>{11});
  CHECK(t.valid_next(TokenSeq{10, 11}) == std::vector<TokenId>{kEnd, 12, 13});
  CHECK(t.valid_next(TokenSeq{10, 11, 12}) == std::vector<TokenId>{kEnd});
  CHECK(t.valid_next(TokenSeq{99}).empty());
  CHECK(t.valid_next(TokenSeq{10, 11, 12, kEnd}).empty());
  CHECK(t.walk(TokenSeq{99}) == TokenTrie::kNone);
  CHECK(t.item_at(t.walk(TokenSeq{10, 11, 13, kEnd})) == 2);
  CHECK(t.item_at(t.walk(TokenSeq{10, 11})) == -1);
  // root + 10, 11, END, 12, END, 13, END, 14, END
  CHECK(t.node_count() == 10);
}

TEST_CASE("build rejects malformed sequences") {
  CHECK_THROWS_AS(TokenTrie::build({{10, kEnd}, {10, kEnd}}, kEnd), Error);
  CHECK_THROWS_AS(TokenTrie::build({{10, 11}}, kEnd), Error);
  CHECK_THROWS_AS(TokenTrie::build({{10, kEnd, 11, kEnd}}, kEnd), Error);
  try {
    TokenTrie::build({{10, kEnd}, {10, kEnd}}, kEnd);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CatalogIntegrity);
  }
}

TEST_CASE("empty trie has only the root") {
  auto t = TokenTrie::build({}, kEnd);
  CHECK(t.node_count() == 1);
  CHECK(t.item_count() == 0);
  CHECK(t.valid_next(TokenSeq{}).empty());
}

TEST_CASE("valid_next matches a linear scan on random prefixes") {
  auto c = gen_catalog(21, 15, 8);
  auto t = TokenTrie::build(c.sequences(), Vocab::kEnd);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, c.size() - 1);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(c.vocab().size()) - 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto& s = c.sequence(static_cast<ItemId>(pick(rng)));
    std::uniform_int_distribution<std::size_t> cut(0, s.size());
    TokenSeq prefix(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(cut(rng)));
    if (trial % 4 == 0 && !prefix.empty()) prefix.back() = tok(rng);  // off-trie probes
    REQUIRE(t.valid_next(prefix) == oracle::scan_valid_next(c.sequences(), prefix));
  }
}

TEST_CASE("masks_for_target") {
  auto t = TokenTrie::build(iron_man(), kEnd);
  TokenSeq target{10, 11, 12, kEnd};
  auto m = masks_for_target(t, target, 20);
  REQUIRE(m.positions() == 4);
  CHECK(m.valid[0] == std::vector<TokenId>{10, 14});
  CHECK(m.valid[2] == std::vector<TokenId>{kEnd, 12, 13});
  CHECK(m.valid_count(3) == 1);
  for (std::size_t p = 0; p < m.positions(); ++p) {
    REQUIRE(m.dense[p].size() == 20);
    std::size_t on = 0;
    for (auto b : m.dense[p]) on += b;
    CHECK(on == m.valid_count(p));
    CHECK(m.dense[p][static_cast<std::size_t>(target[p])] == 1);
  }
  CHECK_THROWS_AS(masks_for_target(t, TokenSeq{10, 12, kEnd}, 20), Error);
  CHECK_THROWS_AS(masks_for_target(t, TokenSeq{10, 11}, 20), Error);
}

TEST_CASE("single item: every position is forced") {
  auto t = TokenTrie::build({{7, 8, 9, kEnd}}, kEnd);
  auto m = masks_for_target(t, TokenSeq{7, 8, 9, kEnd}, 10);
  for (std::size_t p = 0; p < m.positions(); ++p) CHECK(m.valid_count(p) == 1);
  CHECK(average_valid_tokens(t, {{7, 8, 9, kEnd}}) == doctest::Approx(1.0));
}

TEST_CASE("average_valid_tokens by hand") {
  auto t = TokenTrie::build(iron_man(), kEnd);
  // {10,11,END}: 2,1,3  {14,END}: 2,1  -> 9 / 5
  CHECK(average_valid_tokens(t, {{10, 11, kEnd}, {14, kEnd}}) == doctest::Approx(9.0 / 5.0));
}

TEST_CASE("every root-to-END path spells exactly one stored item") {
  auto c = gen_catalog(4, 6, 5);
  auto t = TokenTrie::build(c.sequences(), Vocab::kEnd);
  std::size_t leaves = 0;
  std::vector<std::pair<TokenTrie::NodeIndex, TokenSeq>> stack{{TokenTrie::kRoot, {}}};
  while (!stack.empty()) {
    auto [node, path] = stack.back();
    stack.pop_back();
    if (t.item_at(node) >= 0) {
      ++leaves;
      CHECK(c.sequence(t.item_at(node)) == path);
      CHECK(t.child_tokens(node).empty());
    }
    auto toks = t.child_tokens(node);
    auto kids = t.child_nodes(node);
    CHECK(std::is_sorted(toks.begin(), toks.end()));
    for (std::size_t i = 0; i < toks.size(); ++i) {
      TokenSeq next = path;
      next.push_back(toks[i]);
      stack.push_back({kids[i], next});
    }
  }
  CHECK(leaves == c.size());
}

TEST_CASE("dump_json lists one edge per non-root node") {
  auto t = TokenTrie::build(iron_man(), kEnd);
  std::ostringstream os;
  t.dump_json(os);
  auto s = os.str();
  std::size_t edges = 0;
  for (std::size_t pos = s.find("\"token\""); pos != std::string::npos; pos = s.find("\"token\"", pos + 1)) ++edges;
  CHECK(edges == t.node_count() - 1);
}

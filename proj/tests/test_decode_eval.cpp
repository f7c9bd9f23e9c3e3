#include <cmath>
#include <random>
#include <set>

#include "catalog.hpp"
#include "decode_eval.hpp"
#include "doctest.h"
#include "toy_model.hpp"

using namespace msl;
using doctest::Approx;

namespace {

constexpr TokenId kEnd = Vocab::kEnd;

// d = 1 with every embedding equal to 1, so the encoding is always h = 1 and
// the logit of z is simply U[z] + b[z].
ModelParams constant_context_model(const std::vector<double>& logits) {
  const int V = static_cast<int>(logits.size());
  ModelParams p(1, V);
  for (int z = 0; z < V; ++z) {
    p.E[static_cast<std::size_t>(z)] = 1.0;
    p.U[static_cast<std::size_t>(z)] = logits[static_cast<std::size_t>(z)];
  }
  return p;
}

struct World {
  ItemCatalog catalog;
  TokenTrie trie;
  ModelParams model;
  TokenSeq prompt;
};

World random_world(std::uint64_t seed, int max_items) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> fr(1, 4);
  int n_fr = fr(rng);
  int ipf = std::max(1, max_items / n_fr);
  TitleShape shape;
  shape.suffix_pool = 6;
  shape.distractor_tokens = 5;
  World w;
  w.catalog = gen_catalog(seed, n_fr, ipf, shape);
  w.trie = TokenTrie::build(w.catalog.sequences(), kEnd);
  w.model = init_params(seed + 1, 4, static_cast<int>(w.catalog.vocab().size()), 1.5);
  std::uniform_int_distribution<ItemId> item(0, static_cast<ItemId>(w.catalog.size()) - 1);
  w.prompt = build_prompt({item(rng), item(rng)}, w.catalog);
  return w;
}

}  // namespace

TEST_CASE("score_item hand trace on a 3-item catalog") {
  // items: {4}, {4 5}, {5}
  std::vector<TokenSeq> seqs{{4, kEnd}, {4, 5, kEnd}, {5, kEnd}};
  auto trie = TokenTrie::build(seqs, kEnd);
  const double f3 = 0.5, f4 = 1.0, f5 = -0.2;
  auto model = constant_context_model({0, 0, 0, f3, f4, f5});
  TokenSeq prompt{Vocab::kAsk};

  const double p4 = std::exp(f4) / (std::exp(f4) + std::exp(f5));
  const double p_end_after_4 = std::exp(f3) / (std::exp(f3) + std::exp(f5));
  CHECK(score_item(model, trie, prompt, seqs[0]) == Approx(std::log(p4) + std::log(p_end_after_4)).epsilon(1e-14));
  CHECK(score_item(model, trie, prompt, seqs[1]) == Approx(std::log(p4) + std::log(1 - p_end_after_4)).epsilon(1e-14));
  CHECK(score_item(model, trie, prompt, seqs[2]) == Approx(std::log(1 - p4)).epsilon(1e-14));

  auto all = score_all_items(model, trie, prompt);
  for (std::size_t i = 0; i < 3; ++i) CHECK(all[i] == Approx(score_item(model, trie, prompt, seqs[i])).epsilon(1e-14));
}

TEST_CASE("single-item catalog") {
  auto trie = TokenTrie::build({{7, 8, kEnd}}, kEnd);
  auto model = init_params(1, 3, 10, 2.0);
  TokenSeq prompt{7, Vocab::kAsk};
  CHECK(score_item(model, trie, prompt, TokenSeq{7, 8, kEnd}) == 0.0);
  auto list = constrained_beam_search(model, trie, prompt, BeamOptions{10, false});
  REQUIRE(list.size() == 1);
  CHECK(list.items[0] == 0);
  CHECK(list.scores[0] == 0.0);
  auto b = bound_chain_check(model, trie, prompt, 0, TokenSeq{7, 8, kEnd});
  CHECK(b.rank == 1);
  CHECK(b.neg_log_ndcg_log2 == 0.0);
  CHECK(b.neg_log_ndcg_ln == Approx(std::log(std::log(2.0))));
  CHECK(b.msl == 0.0);
  CHECK(b.holds());
}

TEST_CASE("masked item probabilities sum to one") {
  for (std::uint64_t s = 1; s <= 30; ++s) {
    auto w = random_world(s, 50);
    double total = 0;
    for (double v : score_all_items(w.model, w.trie, w.prompt)) total += std::exp(v);
    CHECK(total == Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("wide beam equals exhaustive enumeration") {
  for (std::uint64_t s = 1; s <= 40; ++s) {
    auto w = random_world(100 + s, 50);
    auto beam = constrained_beam_search(w.model, w.trie, w.prompt, BeamOptions{w.catalog.size(), false});
    auto exact = rank_all_items(w.model, w.trie, w.prompt);
    REQUIRE(beam.items == exact.items);
    for (std::size_t i = 0; i < beam.size(); ++i) CHECK(beam.scores[i] == exact.scores[i]);
    for (std::size_t i = 1; i < beam.size(); ++i) {
      CHECK(beam.scores[i] <= beam.scores[i - 1]);
      if (beam.scores[i] == beam.scores[i - 1]) CHECK(beam.items[i] > beam.items[i - 1]);
    }
    std::set<ItemId> uniq(beam.items.begin(), beam.items.end());
    CHECK(uniq.size() == beam.size());
  }
}

TEST_CASE("narrow beams emit only catalog items, never more than the beam size") {
  for (std::uint64_t s = 1; s <= 20; ++s) {
    auto w = random_world(300 + s, 60);
    for (std::size_t k : {1u, 3u, 10u}) {
      auto list = constrained_beam_search(w.model, w.trie, w.prompt, BeamOptions{k, false});
      CHECK(list.size() <= k);
      CHECK(list.size() >= 1);
      for (ItemId v : list.items) {
        CHECK(v >= 0);
        CHECK(static_cast<std::size_t>(v) < w.catalog.size());
      }
    }
  }
}

TEST_CASE("greedy beam agrees with enumeration when greedy is optimal") {
  int checked = 0;
  for (std::uint64_t s = 1; s <= 200; ++s) {
    auto w = random_world(500 + s, 20);
    auto exact = rank_all_items(w.model, w.trie, w.prompt);
    // Follow the locally best token at every step.
    TokenSeq ctx = w.prompt, path;
    for (;;) {
      auto next = w.trie.valid_next(path);
      auto f = forward(w.model, ctx).values;
      TokenId best = next[0];
      for (TokenId z : next)
        if (f[static_cast<std::size_t>(z)] > f[static_cast<std::size_t>(best)]) best = z;
      path.push_back(best);
      ctx.push_back(best);
      if (best == kEnd) break;
    }
    ItemId greedy = w.trie.item_at(w.trie.walk(path));
    if (greedy != exact.items[0]) continue;
    ++checked;
    auto list = constrained_beam_search(w.model, w.trie, w.prompt, BeamOptions{1, false});
    CHECK(list.items[0] == greedy);
  }
  CHECK(checked > 20);
}

TEST_CASE("ndcg and hit ratio") {
  RankedList l;
  l.items = {5, 2, 9, 1};
  l.scores = {-1, -2, -3, -4};
  CHECK(ndcg_at_k(l, 5, 10) == 1.0);
  CHECK(hr_at_k(l, 5, 10) == 1.0);
  CHECK(ndcg_at_k(l, 9, 10) == Approx(0.5));
  CHECK(ndcg_at_k(l, 1, 3) == 0.0);
  CHECK(hr_at_k(l, 1, 3) == 0.0);
  CHECK(ndcg_at_k(l, 42, 10) == 0.0);
  CHECK(l.rank_of(9) == 3);
  CHECK(l.rank_of(42) == 0);

  MetricsReport r;
  r.add(l, 5);
  r.add(l, 9);
  r.add(l, 42);
  r.finalize();
  CHECK(r.users == 3);
  CHECK(r.ndcg10 == Approx(0.5));
  CHECK(r.hr10 == Approx(2.0 / 3.0));
  CHECK(r.ndcg5 <= r.hr5);
  CHECK(r.hr5 <= r.hr10);
}

TEST_CASE("bound chain on random small worlds") {
  for (std::uint64_t s = 1; s <= 500; ++s) {
    auto w = random_world(1000 + s, 20);
    ItemId pos = static_cast<ItemId>(s % w.catalog.size());
    auto b = bound_chain_check(w.model, w.trie, w.prompt, pos, w.catalog.sequence(pos));
    REQUIRE(b.holds());
    CHECK(b.neg_log_ndcg_ln <= b.msl + 1e-12);
    CHECK(b.msl <= b.lml + 1e-12);
  }
}

TEST_CASE("bound chain with the positive ranked last") {
  std::vector<TokenSeq> seqs{{4, kEnd}, {5, kEnd}, {6, kEnd}, {7, kEnd}};
  auto trie = TokenTrie::build(seqs, kEnd);
  auto model = constant_context_model({0, 0, 0, 0, 3, 2, 1, -8});
  TokenSeq prompt{Vocab::kAsk};
  auto b = bound_chain_check(model, trie, prompt, 3, seqs[3]);
  CHECK(b.rank == 4);
  CHECK(b.holds());
}

TEST_CASE("tied scores use the pessimistic rank") {
  std::vector<TokenSeq> seqs{{4, kEnd}, {5, kEnd}, {6, kEnd}};
  auto trie = TokenTrie::build(seqs, kEnd);
  auto model = constant_context_model(std::vector<double>(7, 0.0));
  auto b = bound_chain_check(model, trie, TokenSeq{Vocab::kAsk}, 0, seqs[0]);
  CHECK(b.rank == 3);
  CHECK(b.holds());
}

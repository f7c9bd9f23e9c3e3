#pragma once

#include <span>
#include <vector>

#include "common.hpp"
#include "token_trie.hpp"
#include "toy_model.hpp"

namespace msl {

// sum_t log P^valid(y_t | prompt, y_<t) at tau = 1, END position included.
double score_item(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt,
                  std::span<const TokenId> item_sequence);

// score_item for every stored item, indexed by item id, via one trie traversal.
std::vector<double> score_all_items(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt);

struct BeamHypothesis {
  TokenSeq prefix;
  TokenTrie::NodeIndex node = TokenTrie::kRoot;
  double cum_log_prob = 0.0;
  bool complete = false;
};

struct RankedList {
  std::vector<ItemId> items;
  std::vector<double> scores;
  std::size_t size() const { return items.size(); }
  // 1-based position of `item`, or 0 when absent.
  std::size_t rank_of(ItemId item) const;
};

struct BeamOptions {
  std::size_t beam_size = 10;
  bool length_normalize = false;
};

// Beam search whose expansions are restricted to trie-valid tokens. Completed
// hypotheses retire into the result pool; output is sorted by score, ties by item id.
RankedList constrained_beam_search(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt,
                                   const BeamOptions& options);

// Exhaustive ranking of every item by score_item, same ordering rule.
RankedList rank_all_items(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt);

// Single-positive metrics; zero when the positive is outside the top k.
double ndcg_at_k(const RankedList& list, ItemId positive, std::size_t k);
double hr_at_k(const RankedList& list, ItemId positive, std::size_t k);

struct MetricsReport {
  double ndcg5 = 0.0, ndcg10 = 0.0, hr5 = 0.0, hr10 = 0.0;
  std::size_t users = 0;

  void add(const RankedList& list, ItemId positive);
  // Converts the running sums into macro averages.
  void finalize();
};

struct BoundCheck {
  std::size_t rank = 0;       // pessimistic: |{v : s_v >= s_p}|
  double neg_log_ndcg_ln = 0.0;    // ln(ln(1 + rank))
  double neg_log_ndcg_log2 = 0.0;  // log2(log2(1 + rank))
  double msl = 0.0;
  double lml = 0.0;
  bool holds_ln = false;
  bool holds_log2 = false;
  bool holds() const { return holds_ln && holds_log2; }
};

// Evaluates -log NDCG <= MSL <= LML for one prompt and positive item, with the
// rank obtained from exhaustive enumeration. Comparisons allow 1e-12 relative
// slack for floating-point rounding of tied scores.
BoundCheck bound_chain_check(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt, ItemId positive,
                        std::span<const TokenId> positive_sequence);

}  // namespace msl

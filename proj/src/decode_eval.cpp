#include "decode_eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "losses.hpp"

namespace msl {

namespace {

TokenSeq concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSeq out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// log P^valid over the children of `node`, in child order.
std::vector<double> child_log_probs(const ModelParams& model, const TokenTrie& trie, TokenTrie::NodeIndex node,
                                    std::span<const TokenId> context) {
  auto toks = trie.child_tokens(node);
  std::vector<double> out(toks.size());
  if (toks.size() == 1) {
    out[0] = 0.0;
    return out;
  }
  auto h = encode(model, context);
  logits_subset(model, h, toks, out);
  double mx = *std::max_element(out.begin(), out.end());
  double acc = 0.0;
  for (double f : out) acc += std::exp(f - mx);
  const double lse = mx + std::log(acc);
  for (double& f : out) f -= lse;
  return out;
}

void sort_ranked(RankedList& r) {
  std::vector<std::size_t> idx(r.items.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (r.scores[a] != r.scores[b]) return r.scores[a] > r.scores[b];
    return r.items[a] < r.items[b];
  });
  RankedList out;
  for (auto i : idx) {
    out.items.push_back(r.items[i]);
    out.scores.push_back(r.scores[i]);
  }
  r = std::move(out);
}

}  // namespace

double score_item(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt,
                  std::span<const TokenId> item_sequence) {
  TokenSeq context(prompt.begin(), prompt.end());
  TokenTrie::NodeIndex node = TokenTrie::kRoot;
  double score = 0.0;
  for (TokenId tok : item_sequence) {
    auto toks = trie.child_tokens(node);
    auto pos = std::lower_bound(toks.begin(), toks.end(), tok);
    require(pos != toks.end() && *pos == tok, ErrorCode::InvalidArgument, "item sequence is not stored in the trie");
    auto lp = child_log_probs(model, trie, node, context);
    score += lp[static_cast<std::size_t>(pos - toks.begin())];
    node = trie.child(node, tok);
    context.push_back(tok);
  }
  require(trie.item_at(node) >= 0, ErrorCode::InvalidArgument, "item sequence is not stored in the trie");
  return score;
}

std::vector<double> score_all_items(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt) {
  std::vector<double> scores(trie.item_count(), 0.0);
  TokenSeq context(prompt.begin(), prompt.end());
  struct Frame {
    TokenTrie::NodeIndex node;
    double score;
    std::size_t depth;
    TokenId via;
  };
  std::vector<Frame> stack{{TokenTrie::kRoot, 0.0, 0, -1}};
  const std::size_t base = context.size();
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    context.resize(base + (f.depth > 0 ? f.depth - 1 : 0));
    if (f.depth > 0) context.push_back(f.via);
    ItemId item = trie.item_at(f.node);
    if (item >= 0) {
      scores[static_cast<std::size_t>(item)] = f.score;
      continue;
    }
    auto toks = trie.child_tokens(f.node);
    auto kids = trie.child_nodes(f.node);
    auto lp = child_log_probs(model, trie, f.node, context);
    for (std::size_t k = toks.size(); k-- > 0;) stack.push_back({kids[k], f.score + lp[k], f.depth + 1, toks[k]});
  }
  return scores;
}

std::size_t RankedList::rank_of(ItemId item) const {
  auto it = std::find(items.begin(), items.end(), item);
  return it == items.end() ? 0 : static_cast<std::size_t>(it - items.begin()) + 1;
}

RankedList constrained_beam_search(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt,
                                   const BeamOptions& opt) {
  require(opt.beam_size >= 1, ErrorCode::InvalidArgument, "beam size must be >= 1");
  auto ranking_score = [&](const BeamHypothesis& h) {
    return opt.length_normalize ? h.cum_log_prob / static_cast<double>(h.prefix.size()) : h.cum_log_prob;
  };
  auto better = [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    double sa = ranking_score(a), sb = ranking_score(b);
    if (sa != sb) return sa > sb;
    return a.prefix < b.prefix;
  };

  std::vector<BeamHypothesis> live;
  if (trie.child_tokens(TokenTrie::kRoot).empty()) return {};
  live.push_back(BeamHypothesis{});
  std::vector<BeamHypothesis> finished;

  while (!live.empty()) {
    std::vector<BeamHypothesis> candidates;
    for (const auto& h : live) {
      auto context = concat(prompt, h.prefix);
      auto toks = trie.child_tokens(h.node);
      auto kids = trie.child_nodes(h.node);
      auto lp = child_log_probs(model, trie, h.node, context);
      for (std::size_t k = 0; k < toks.size(); ++k) {
        BeamHypothesis c;
        c.prefix = h.prefix;
        c.prefix.push_back(toks[k]);
        c.node = kids[k];
        c.cum_log_prob = h.cum_log_prob + lp[k];
        c.complete = trie.item_at(c.node) >= 0;
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > opt.beam_size) candidates.resize(opt.beam_size);
    live.clear();
    for (auto& c : candidates) (c.complete ? finished : live).push_back(std::move(c));

    // Raw log-probabilities only decrease along a path, so once the pool holds
    // beam_size results no live hypothesis can overtake the worst of them.
    if (!opt.length_normalize && finished.size() >= opt.beam_size && !live.empty()) {
      std::sort(finished.begin(), finished.end(), better);
      double worst_kept = finished[opt.beam_size - 1].cum_log_prob;
      double best_live = live.front().cum_log_prob;
      for (const auto& h : live) best_live = std::max(best_live, h.cum_log_prob);
      if (best_live < worst_kept) break;
    }
  }

  RankedList out;
  for (const auto& h : finished) {
    out.items.push_back(trie.item_at(h.node));
    out.scores.push_back(ranking_score(h));
  }
  sort_ranked(out);
  if (out.items.size() > opt.beam_size) {
    out.items.resize(opt.beam_size);
    out.scores.resize(opt.beam_size);
  }
  return out;
}

RankedList rank_all_items(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt) {
  RankedList out;
  out.scores = score_all_items(model, trie, prompt);
  out.items.resize(out.scores.size());
  std::iota(out.items.begin(), out.items.end(), 0);
  sort_ranked(out);
  return out;
}

double ndcg_at_k(const RankedList& list, ItemId positive, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "K must be >= 1");
  std::size_t r = list.rank_of(positive);
  if (r == 0 || r > k) return 0.0;
  return 1.0 / std::log2(1.0 + static_cast<double>(r));
}

double hr_at_k(const RankedList& list, ItemId positive, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "K must be >= 1");
  std::size_t r = list.rank_of(positive);
  return (r != 0 && r <= k) ? 1.0 : 0.0;
}

void MetricsReport::add(const RankedList& list, ItemId positive) {
  ndcg5 += ndcg_at_k(list, positive, 5);
  ndcg10 += ndcg_at_k(list, positive, 10);
  hr5 += hr_at_k(list, positive, 5);
  hr10 += hr_at_k(list, positive, 10);
  ++users;
}

void MetricsReport::finalize() {
  if (users == 0) return;
  const double n = static_cast<double>(users);
  ndcg5 /= n;
  ndcg10 /= n;
  hr5 /= n;
  hr10 /= n;
}

BoundCheck bound_chain_check(const ModelParams& model, const TokenTrie& trie, std::span<const TokenId> prompt, ItemId positive,
                        std::span<const TokenId> positive_sequence) {
  auto scores = score_all_items(model, trie, prompt);
  require(positive >= 0 && static_cast<std::size_t>(positive) < scores.size(), ErrorCode::InvalidArgument,
          "positive item is not in the catalog");
  const double sp = scores[static_cast<std::size_t>(positive)];
  BoundCheck out;
  out.rank = static_cast<std::size_t>(std::count_if(scores.begin(), scores.end(), [&](double s) { return s >= sp; }));
  const double r = static_cast<double>(out.rank);
  out.neg_log_ndcg_ln = std::log(std::log(1.0 + r));
  out.neg_log_ndcg_log2 = std::log2(std::log2(1.0 + r));

  TokenSeq context(prompt.begin(), prompt.end());
  for (TokenId tok : positive_sequence) {
    auto row = forward(model, context);
    out.lml += lml_token(row.values, tok);
    context.push_back(tok);
  }
  out.msl = -score_item(model, trie, prompt, positive_sequence);

  auto le = [](double a, double b) { return a <= b + 1e-12 * std::max(1.0, std::abs(b)); };
  const bool upper = le(out.msl, out.lml);
  out.holds_ln = le(out.neg_log_ndcg_ln, out.msl) && upper;
  out.holds_log2 = le(out.neg_log_ndcg_log2, out.msl) && upper;
  return out;
}

}  // namespace msl

#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "common.hpp"

namespace msl {

// Prefix tree over END-terminated item token sequences. Immutable after
// construction; children of every node are kept sorted by token id.
class TokenTrie {
 public:
  using NodeIndex = std::uint32_t;
  static constexpr NodeIndex kRoot = 0;
  static constexpr NodeIndex kNone = 0xffffffffu;

  // sequences[i] is the terminated sequence of item i.
  static TokenTrie build(const std::vector<TokenSeq>& sequences, TokenId end_token);

  // Tokens z such that prefix+z is a prefix of some stored sequence, ascending.
  std::vector<TokenId> valid_next(std::span<const TokenId> prefix) const;

  // Node reached by following prefix from the root, or kNone.
  NodeIndex walk(std::span<const TokenId> prefix) const;
  NodeIndex child(NodeIndex node, TokenId token) const;
  std::span<const TokenId> child_tokens(NodeIndex node) const { return nodes_[node].tokens; }
  std::span<const NodeIndex> child_nodes(NodeIndex node) const { return nodes_[node].children; }
  // Item stored at a terminal (END) node, else -1.
  ItemId item_at(NodeIndex node) const { return nodes_[node].item; }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t item_count() const { return item_count_; }
  std::size_t stored_tokens() const { return stored_tokens_; }
  TokenId end_token() const { return end_; }

  // Debug dump: {"edges": [{"parent_path_hash", "token", "child_is_terminal"}, ...]}.
  void dump_json(std::ostream& os) const;

 private:
  struct Node {
    std::vector<TokenId> tokens;
    std::vector<NodeIndex> children;
    ItemId item = -1;
  };

  std::vector<Node> nodes_{Node{}};
  std::size_t item_count_ = 0;
  std::size_t stored_tokens_ = 0;
  TokenId end_ = 0;
};

// Per-position valid-token sets for one target sequence, in both the
// index-list form used by the loss kernels and a dense boolean form.
struct ValidMask {
  std::vector<std::vector<TokenId>> valid;  // ascending ids per position
  std::vector<std::vector<std::uint8_t>> dense;
  std::size_t positions() const { return valid.size(); }
  std::size_t valid_count(std::size_t t) const { return valid[t].size(); }
};

ValidMask masks_for_target(const TokenTrie& trie, std::span<const TokenId> target, std::size_t vocab_size);

// Mean valid-token count over every response position of the given targets.
double average_valid_tokens(const TokenTrie& trie, const std::vector<TokenSeq>& targets);

}  // namespace msl

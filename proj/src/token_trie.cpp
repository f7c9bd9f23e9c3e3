#include "token_trie.hpp"

#include <algorithm>
#include <ostream>

#include <json.hpp>

namespace msl {

TokenTrie TokenTrie::build(const std::vector<TokenSeq>& sequences, TokenId end_token) {
  TokenTrie trie;
  trie.end_ = end_token;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const TokenSeq& seq = sequences[i];
    require(!seq.empty() && seq.back() == end_token, ErrorCode::CatalogIntegrity,
            "sequence " + std::to_string(i) + " is not END-terminated");
    NodeIndex cur = kRoot;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      TokenId tok = seq[t];
      require(tok != end_token || t + 1 == seq.size(), ErrorCode::CatalogIntegrity,
              "END inside sequence " + std::to_string(i));
      auto& node = trie.nodes_[cur];
      auto pos = std::lower_bound(node.tokens.begin(), node.tokens.end(), tok);
      auto off = static_cast<std::size_t>(pos - node.tokens.begin());
      if (pos != node.tokens.end() && *pos == tok) {
        cur = node.children[off];
        continue;
      }
      auto fresh = static_cast<NodeIndex>(trie.nodes_.size());
      node.tokens.insert(pos, tok);
      node.children.insert(node.children.begin() + static_cast<std::ptrdiff_t>(off), fresh);
      trie.nodes_.emplace_back();  // invalidates `node`
      cur = fresh;
    }
    require(trie.nodes_[cur].item < 0, ErrorCode::CatalogIntegrity,
            "duplicate sequence for items " + std::to_string(trie.nodes_[cur].item) + " and " + std::to_string(i));
    trie.nodes_[cur].item = static_cast<ItemId>(i);
    ++trie.item_count_;
    trie.stored_tokens_ += seq.size();
  }
  return trie;
}

TokenTrie::NodeIndex TokenTrie::child(NodeIndex node, TokenId token) const {
  const auto& n = nodes_[node];
  auto pos = std::lower_bound(n.tokens.begin(), n.tokens.end(), token);
  if (pos == n.tokens.end() || *pos != token) return kNone;
  return n.children[static_cast<std::size_t>(pos - n.tokens.begin())];
}

TokenTrie::NodeIndex TokenTrie::walk(std::span<const TokenId> prefix) const {
  NodeIndex cur = kRoot;
  for (TokenId t : prefix) {
    cur = child(cur, t);
    if (cur == kNone) return kNone;
  }
  return cur;
}

std::vector<TokenId> TokenTrie::valid_next(std::span<const TokenId> prefix) const {
  NodeIndex n = walk(prefix);
  if (n == kNone) return {};
  return nodes_[n].tokens;
}

void TokenTrie::dump_json(std::ostream& os) const {
  using nlohmann::json;
  json edges = json::array();
  // Iterative DFS carrying the FNV-1a hash of the parent path.
  struct Frame {
    NodeIndex node;
    std::uint64_t hash;
  };
  std::vector<Frame> stack{{kRoot, 0xcbf29ce484222325ULL}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    const Node& n = nodes_[f.node];
    for (std::size_t k = n.tokens.size(); k-- > 0;) {
      NodeIndex c = n.children[k];
      edges.push_back({{"parent_path_hash", f.hash}, {"token", n.tokens[k]}, {"child_is_terminal", nodes_[c].item >= 0}});
      std::uint64_t h = f.hash;
      auto tok = static_cast<std::uint32_t>(n.tokens[k]);
      for (int b = 0; b < 4; ++b) {
        h ^= (tok >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
      stack.push_back({c, h});
    }
  }
  os << json{{"nodes", nodes_.size()}, {"items", item_count_}, {"edges", std::move(edges)}}.dump() << '\n';
}

ValidMask masks_for_target(const TokenTrie& trie, std::span<const TokenId> target, std::size_t vocab_size) {
  require(!target.empty() && target.back() == trie.end_token(), ErrorCode::InvalidArgument,
          "target must be an END-terminated sequence");
  ValidMask m;
  TokenTrie::NodeIndex cur = TokenTrie::kRoot;
  for (TokenId tok : target) {
    auto toks = trie.child_tokens(cur);
    std::vector<std::uint8_t> dense(vocab_size, 0);
    for (TokenId z : toks) {
      require(z >= 0 && static_cast<std::size_t>(z) < vocab_size, ErrorCode::InvalidArgument, "trie token outside vocabulary");
      dense[static_cast<std::size_t>(z)] = 1;
    }
    m.valid.emplace_back(toks.begin(), toks.end());
    m.dense.push_back(std::move(dense));
    cur = trie.child(cur, tok);
    require(cur != TokenTrie::kNone, ErrorCode::InvalidArgument, "target is not a stored item sequence");
  }
  require(trie.item_at(cur) >= 0, ErrorCode::InvalidArgument, "target is not a stored item sequence");
  return m;
}

double average_valid_tokens(const TokenTrie& trie, const std::vector<TokenSeq>& targets) {
  std::size_t positions = 0, total = 0;
  for (const auto& seq : targets) {
    TokenTrie::NodeIndex cur = TokenTrie::kRoot;
    for (TokenId tok : seq) {
      require(cur != TokenTrie::kNone, ErrorCode::InvalidArgument, "target is not a stored item sequence");
      total += trie.child_tokens(cur).size();
      ++positions;
      cur = trie.child(cur, tok);
    }
  }
  return positions == 0 ? 0.0 : static_cast<double>(total) / static_cast<double>(positions);
}

}  // namespace msl

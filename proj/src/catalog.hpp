#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace msl {

// Closed token vocabulary. Ids are dense; the first four are reserved.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kSep = 1;  // between history items in a prompt
  static constexpr TokenId kAsk = 2;  // end of prompt, start of response
  static constexpr TokenId kEnd = 3;  // item terminator

  Vocab();

  TokenId add(const std::string& token);
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_reserved(TokenId id) { return id >= 0 && id <= kEnd; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct TitleShape {
  int shared_prefix_len = 1;  // leading tokens shared by every item of a franchise
  int suffix_min = 1;
  int suffix_max = 3;
  int suffix_pool = 40;         // item words, reused across franchises
  int distractor_tokens = 200;  // vocabulary entries never used in any title
  int max_attempts = 32;        // redraws before a collision suffix is appended
};

struct Item {
  ItemId id = 0;
  std::vector<std::string> title;
};

class ItemCatalog {
 public:
  ItemCatalog() = default;
  ItemCatalog(std::vector<Item> items, Vocab vocab, int items_per_franchise);

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  const std::vector<Item>& items() const { return items_; }
  const Item& item(ItemId id) const;
  const Vocab& vocab() const { return vocab_; }
  int items_per_franchise() const { return items_per_franchise_; }
  int franchise_of(ItemId id) const { return id / items_per_franchise_; }
  int n_franchises() const;

  TokenSeq title_tokens(ItemId id) const;
  // Title tokens followed by END.
  const TokenSeq& sequence(ItemId id) const;
  const std::vector<TokenSeq>& sequences() const { return sequences_; }
  // Exact title lookup; -1 when no item has this title.
  ItemId find_title(const TokenSeq& title) const;

 private:
  std::vector<Item> items_;
  Vocab vocab_;
  int items_per_franchise_ = 1;
  std::vector<TokenSeq> sequences_;
  std::map<TokenSeq, ItemId> by_title_;
};

ItemCatalog gen_catalog(std::uint64_t seed, int n_franchises, int items_per_franchise,
                        const TitleShape& shape = {});

enum class Split { Train, Valid, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct Interaction {
  int user_id = 0;
  std::vector<ItemId> history;
  ItemId target = 0;
  Split split = Split::Train;
};

struct InteractionConfig {
  int n_users = 2000;
  int history_min = 3;
  int history_max = 8;
  double affinity = 0.8;
  // Zipf exponent for picks inside the preferred franchise; 0 means uniform.
  double popularity_skew = 0.0;
};

struct InteractionSet {
  std::vector<Interaction> records;
  std::vector<int> preferred_franchise;  // indexed by user_id

  std::vector<const Interaction*> split(Split s) const;
};

InteractionSet gen_interactions(std::uint64_t seed, const ItemCatalog& catalog,
                                const InteractionConfig& config);

// [title(h0), SEP, title(h1), ..., ASK]
TokenSeq build_prompt(const std::vector<ItemId>& history, const ItemCatalog& catalog);
// Inverse of build_prompt.
std::vector<ItemId> parse_prompt(const TokenSeq& prompt, const ItemCatalog& catalog);

// JSON Lines files.
void write_vocab(std::ostream& os, const Vocab& vocab);
void write_catalog(std::ostream& os, const ItemCatalog& catalog);
void write_interactions(std::ostream& os, const InteractionSet& set);
Vocab read_vocab(std::istream& is);
ItemCatalog read_catalog(std::istream& is, const Vocab& vocab, int items_per_franchise);
InteractionSet read_interactions(std::istream& is, const ItemCatalog& catalog);

}  // namespace msl

#include "catalog.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_set>

#include <json.hpp>

namespace msl {

namespace {

const char* const kReserved[] = {"<pad>", "<sep>", "<ask>", "<end>"};

const char* const kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                               "s", "t", "v", "z", "br", "cr", "dr", "gl", "st", "tr"};
const char* const kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
const char* const kCodas[] = {"", "n", "r", "s", "x", "k", "l"};

// Pronounceable synthetic words, unique across one generator instance.
class WordSource {
 public:
  explicit WordSource(Rng& rng) : rng_(rng) {}

  std::string next(int syllables) {
    for (;;) {
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += pick(kOnsets);
        w += pick(kVowels);
      }
      w += pick(kCodas);
      if (used_.insert(w).second) return w;
      // Space of short words exhausted: grow the word.
      ++syllables;
    }
  }

 private:
  template <std::size_t N>
  const char* pick(const char* const (&arr)[N]) {
    std::uniform_int_distribution<std::size_t> d(0, N - 1);
    return arr[d(rng_)];
  }

  Rng& rng_;
  std::unordered_set<std::string> used_;
};

}  // namespace

Vocab::Vocab() {
  for (const char* r : kReserved) add(r);
}

TokenId Vocab::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

TokenId Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  require(it != index_.end(), ErrorCode::InvalidArgument, "unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocab::token(TokenId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::InvalidArgument,
          "token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

ItemCatalog::ItemCatalog(std::vector<Item> items, Vocab vocab, int items_per_franchise)
    : items_(std::move(items)), vocab_(std::move(vocab)), items_per_franchise_(items_per_franchise) {
  require(items_per_franchise_ >= 1, ErrorCode::InvalidArgument, "items_per_franchise must be >= 1");
  sequences_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const Item& it = items_[i];
    require(it.id == static_cast<ItemId>(i), ErrorCode::CatalogIntegrity,
            "item ids must be dense and ordered, got " + std::to_string(it.id) + " at " + std::to_string(i));
    require(!it.title.empty(), ErrorCode::CatalogIntegrity, "empty title for item " + std::to_string(it.id));
    TokenSeq seq;
    for (const auto& w : it.title) {
      TokenId t = vocab_.id(w);
      require(!Vocab::is_reserved(t), ErrorCode::CatalogIntegrity, "reserved token inside title of item " + std::to_string(it.id));
      seq.push_back(t);
    }
    require(by_title_.emplace(seq, it.id).second, ErrorCode::CatalogIntegrity,
            "duplicate title for item " + std::to_string(it.id));
    seq.push_back(Vocab::kEnd);
    sequences_.push_back(std::move(seq));
  }
}

const Item& ItemCatalog::item(ItemId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < items_.size(), ErrorCode::InvalidArgument,
          "unknown item id " + std::to_string(id));
  return items_[static_cast<std::size_t>(id)];
}

int ItemCatalog::n_franchises() const {
  return static_cast<int>((items_.size() + items_per_franchise_ - 1) / items_per_franchise_);
}

TokenSeq ItemCatalog::title_tokens(ItemId id) const {
  const TokenSeq& s = sequence(id);
  return TokenSeq(s.begin(), s.end() - 1);
}

const TokenSeq& ItemCatalog::sequence(ItemId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < sequences_.size(), ErrorCode::InvalidArgument,
          "unknown item id " + std::to_string(id));
  return sequences_[static_cast<std::size_t>(id)];
}

ItemId ItemCatalog::find_title(const TokenSeq& title) const {
  auto it = by_title_.find(title);
  return it == by_title_.end() ? -1 : it->second;
}

ItemCatalog gen_catalog(std::uint64_t seed, int n_franchises, int items_per_franchise, const TitleShape& shape) {
  require(n_franchises >= 1, ErrorCode::InvalidArgument, "n_franchises must be >= 1");
  require(items_per_franchise >= 1, ErrorCode::InvalidArgument, "items_per_franchise must be >= 1");
  require(shape.shared_prefix_len >= 1, ErrorCode::InvalidArgument, "shared_prefix_len must be >= 1");
  require(shape.suffix_min >= 0 && shape.suffix_max >= shape.suffix_min, ErrorCode::InvalidArgument,
          "invalid suffix length range");
  require(shape.suffix_pool >= 1 && shape.distractor_tokens >= 0, ErrorCode::InvalidArgument,
          "invalid word pool sizes");

  Rng rng(seed);
  WordSource words(rng);
  Vocab vocab;

  std::vector<std::vector<std::string>> prefixes;
  for (int f = 0; f < n_franchises; ++f) {
    std::vector<std::string> p{words.next(2)};
    prefixes.push_back(std::move(p));
  }
  std::vector<std::string> pool;
  for (int i = 0; i < shape.suffix_pool; ++i) pool.push_back(words.next(1));
  // Shared-prefix tokens after the first are drawn from the item word pool.
  std::uniform_int_distribution<int> pool_pick(0, shape.suffix_pool - 1);
  for (auto& p : prefixes)
    for (int k = 1; k < shape.shared_prefix_len; ++k) p.push_back(pool[static_cast<std::size_t>(pool_pick(rng))]);

  for (const auto& p : prefixes) vocab.add(p.front());
  for (const auto& w : pool) vocab.add(w);

  std::uniform_int_distribution<int> len_pick(shape.suffix_min, shape.suffix_max);
  std::set<std::vector<std::string>> seen;
  std::vector<Item> items;
  std::vector<std::string> collision_tokens;
  for (int f = 0; f < n_franchises; ++f) {
    for (int j = 0; j < items_per_franchise; ++j) {
      std::vector<std::string> title;
      bool ok = false;
      for (int attempt = 0; attempt < shape.max_attempts && !ok; ++attempt) {
        title = prefixes[static_cast<std::size_t>(f)];
        int n = len_pick(rng);
        for (int k = 0; k < n; ++k) title.push_back(pool[static_cast<std::size_t>(pool_pick(rng))]);
        ok = !seen.count(title);
      }
      // Collision suffix: "<title> ii", "<title> iii", ...
      for (int k = 0; !ok && k < 16; ++k) {
        if (collision_tokens.size() <= static_cast<std::size_t>(k))
          collision_tokens.push_back(std::string(static_cast<std::size_t>(k) + 2, 'i'));
        auto candidate = title;
        candidate.push_back(collision_tokens[static_cast<std::size_t>(k)]);
        if (!seen.count(candidate)) {
          title = std::move(candidate);
          ok = true;
        }
      }
      require(ok, ErrorCode::CatalogIntegrity, "title shape cannot produce enough distinct titles");
      seen.insert(title);
      items.push_back(Item{static_cast<ItemId>(items.size()), std::move(title)});
    }
  }
  for (const auto& c : collision_tokens) vocab.add(c);
  for (int i = 0; i < shape.distractor_tokens; ++i) vocab.add(words.next(2));

  return ItemCatalog(std::move(items), std::move(vocab), items_per_franchise);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  fail(ErrorCode::InvalidArgument, "unknown split '" + s + "'");
}

std::vector<const Interaction*> InteractionSet::split(Split s) const {
  std::vector<const Interaction*> out;
  for (const auto& r : records)
    if (r.split == s) out.push_back(&r);
  return out;
}

InteractionSet gen_interactions(std::uint64_t seed, const ItemCatalog& catalog, const InteractionConfig& cfg) {
  require(cfg.affinity >= 0.0 && cfg.affinity <= 1.0, ErrorCode::InvalidArgument, "affinity must lie in [0,1]");
  require(!catalog.empty(), ErrorCode::InvalidArgument, "catalog is empty");
  require(catalog.size() >= 2, ErrorCode::InvalidArgument, "need at least two items to draw a target outside the history");
  require(cfg.n_users >= 0, ErrorCode::InvalidArgument, "n_users must be >= 0");
  require(cfg.history_min >= 1 && cfg.history_max >= cfg.history_min, ErrorCode::InvalidArgument,
          "invalid history length range");
  require(cfg.popularity_skew >= 0.0, ErrorCode::InvalidArgument, "popularity_skew must be >= 0");

  Rng rng(seed);
  const int n_items = static_cast<int>(catalog.size());
  const int ipf = catalog.items_per_franchise();
  const int n_fr = catalog.n_franchises();

  std::uniform_int_distribution<int> fr_pick(0, n_fr - 1);
  std::uniform_int_distribution<int> any_pick(0, n_items - 1);
  std::uniform_int_distribution<int> len_pick(cfg.history_min, cfg.history_max);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  auto franchise_members = [&](int f) {
    int lo = f * ipf;
    int hi = std::min(n_items, lo + ipf);
    return std::pair{lo, hi};
  };
  // Zipf weights by position inside a franchise; the last franchise may be short.
  auto in_franchise = [&](int f) {
    auto [lo, hi] = franchise_members(f);
    std::vector<double> w;
    for (int j = 0; j < hi - lo; ++j) w.push_back(1.0 / std::pow(j + 1.0, cfg.popularity_skew));
    std::discrete_distribution<int> d(w.begin(), w.end());
    return lo + d(rng);
  };
  auto draw = [&](int f) { return coin(rng) < cfg.affinity ? in_franchise(f) : any_pick(rng); };

  InteractionSet set;
  const int n_train = cfg.n_users * 8 / 10;
  const int n_valid = cfg.n_users / 10;
  for (int u = 0; u < cfg.n_users; ++u) {
    Interaction rec;
    rec.user_id = u;
    int f = fr_pick(rng);
    set.preferred_franchise.push_back(f);
    int len = len_pick(rng);
    for (int k = 0; k < len; ++k) rec.history.push_back(draw(f));

    auto in_history = [&](ItemId v) {
      return std::find(rec.history.begin(), rec.history.end(), v) != rec.history.end();
    };
    ItemId target = -1;
    for (int attempt = 0; attempt < 256 && target < 0; ++attempt) {
      ItemId v = draw(f);
      if (!in_history(v)) target = v;
    }
    if (target < 0) {
      // History saturated the sampler: first unseen item of the preferred franchise, else of the catalog.
      auto [lo, hi] = franchise_members(f);
      for (ItemId v = lo; v < hi && target < 0; ++v)
        if (!in_history(v)) target = v;
      for (ItemId v = 0; v < n_items && target < 0; ++v)
        if (!in_history(v)) target = v;
    }
    require(target >= 0, ErrorCode::InvalidArgument, "history covers the whole catalog");
    rec.target = target;
    rec.split = u < n_train ? Split::Train : (u < n_train + n_valid ? Split::Valid : Split::Test);
    set.records.push_back(std::move(rec));
  }
  return set;
}

TokenSeq build_prompt(const std::vector<ItemId>& history, const ItemCatalog& catalog) {
  require(!history.empty(), ErrorCode::InvalidArgument, "history must be non-empty");
  TokenSeq out;
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i > 0) out.push_back(Vocab::kSep);
    const TokenSeq& s = catalog.sequence(history[i]);
    out.insert(out.end(), s.begin(), s.end() - 1);
  }
  out.push_back(Vocab::kAsk);
  return out;
}

std::vector<ItemId> parse_prompt(const TokenSeq& prompt, const ItemCatalog& catalog) {
  require(!prompt.empty() && prompt.back() == Vocab::kAsk, ErrorCode::InvalidArgument, "prompt must end with ASK");
  std::vector<ItemId> out;
  TokenSeq cur;
  auto flush = [&] {
    ItemId v = catalog.find_title(cur);
    require(v >= 0, ErrorCode::InvalidArgument, "prompt segment is not a catalog title");
    out.push_back(v);
    cur.clear();
  };
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
    if (prompt[i] == Vocab::kSep)
      flush();
    else
      cur.push_back(prompt[i]);
  }
  flush();
  return out;
}

using nlohmann::json;

void write_vocab(std::ostream& os, const Vocab& vocab) {
  for (std::size_t i = 0; i < vocab.size(); ++i)
    os << json{{"id", i}, {"token", vocab.tokens()[i]}}.dump() << '\n';
}

void write_catalog(std::ostream& os, const ItemCatalog& catalog) {
  for (const auto& it : catalog.items()) os << json{{"item_id", it.id}, {"title", it.title}}.dump() << '\n';
}

void write_interactions(std::ostream& os, const InteractionSet& set) {
  for (const auto& r : set.records)
    os << json{{"user_id", r.user_id}, {"history", r.history}, {"target", r.target}, {"split", split_name(r.split)}}.dump()
       << '\n';
}

namespace {

template <typename F>
void for_each_line(std::istream& is, F&& f) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      f(j);
    } catch (const json::exception& e) {
      fail(ErrorCode::Io, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

Vocab read_vocab(std::istream& is) {
  Vocab v;
  for_each_line(is, [&](const json& j) {
    auto id = j.at("id").get<TokenId>();
    auto tok = j.at("token").get<std::string>();
    if (static_cast<std::size_t>(id) < v.size()) {
      require(v.token(id) == tok, ErrorCode::Io, "reserved token mismatch at id " + std::to_string(id));
      return;
    }
    require(static_cast<std::size_t>(id) == v.size(), ErrorCode::Io, "vocab ids must be dense");
    require(!v.contains(tok), ErrorCode::Io, "duplicate vocab token '" + tok + "'");
    v.add(tok);
  });
  return v;
}

ItemCatalog read_catalog(std::istream& is, const Vocab& vocab, int items_per_franchise) {
  std::vector<Item> items;
  for_each_line(is, [&](const json& j) {
    items.push_back(Item{j.at("item_id").get<ItemId>(), j.at("title").get<std::vector<std::string>>()});
  });
  return ItemCatalog(std::move(items), vocab, items_per_franchise);
}

InteractionSet read_interactions(std::istream& is, const ItemCatalog& catalog) {
  InteractionSet set;
  auto valid_id = [&](ItemId v) { return v >= 0 && static_cast<std::size_t>(v) < catalog.size(); };
  for_each_line(is, [&](const json& j) {
    Interaction r;
    r.user_id = j.at("user_id").get<int>();
    r.history = j.at("history").get<std::vector<ItemId>>();
    r.target = j.at("target").get<ItemId>();
    r.split = parse_split(j.at("split").get<std::string>());
    require(valid_id(r.target), ErrorCode::Io, "invalid target id");
    for (ItemId v : r.history) require(valid_id(v), ErrorCode::Io, "invalid history id");
    set.records.push_back(std::move(r));
  });
  return set;
}

}  // namespace msl

#include "msl/msl.h"

#include <cstring>
#include <string>

#include <json.hpp>

#include "ats.hpp"
#include "catalog.hpp"
#include "decode_eval.hpp"
#include "harness.hpp"
#include "losses.hpp"
#include "token_trie.hpp"
#include "toy_model.hpp"

struct msl_catalog {
  msl::ItemCatalog catalog;
};

struct msl_trie {
  msl::TokenTrie trie;
};

struct msl_model {
  msl::ModelParams params;
  msl::OptimizerState state;
};

namespace {

thread_local std::string g_last_error;

msl_status to_status(msl::ErrorCode code) {
  switch (code) {
    case msl::ErrorCode::InvalidArgument: return MSL_ERR_INVALID_ARGUMENT;
    case msl::ErrorCode::CatalogIntegrity: return MSL_ERR_CATALOG_INTEGRITY;
    case msl::ErrorCode::NumericAbort: return MSL_ERR_NUMERIC;
    case msl::ErrorCode::Io: return MSL_ERR_IO;
    case msl::ErrorCode::Config: return MSL_ERR_CONFIG;
  }
  return MSL_ERR_INTERNAL;
}

template <typename F>
msl_status guarded(F&& f) {
  try {
    g_last_error.clear();
    f();
    return MSL_OK;
  } catch (const msl::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MSL_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown exception";
    return MSL_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  msl::require(p != nullptr, msl::ErrorCode::InvalidArgument, std::string(what) + " is null");
}

template <typename T>
void copy_out(const std::vector<T>& v, T* out, std::size_t capacity, std::size_t* out_len) {
  if (out_len) *out_len = v.size();
  std::size_t n = std::min(capacity, v.size());
  if (n > 0) {
    need(out, "output buffer");
    std::memcpy(out, v.data(), n * sizeof(T));
  }
}

std::span<const int32_t> span_of(const int32_t* p, std::size_t n) {
  if (n > 0) need(p, "token array");
  return {p, n};
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  msl::require(out != nullptr, msl::ErrorCode::Io, "out of memory");
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* msl_version(void) { return "0.1.0"; }

const char* msl_last_error(void) { return g_last_error.c_str(); }

const char* msl_status_name(msl_status s) {
  switch (s) {
    case MSL_OK: return "ok";
    case MSL_ERR_INVALID_ARGUMENT: return "invalid argument";
    case MSL_ERR_CATALOG_INTEGRITY: return "catalog integrity";
    case MSL_ERR_NUMERIC: return "numeric abort";
    case MSL_ERR_IO: return "io";
    case MSL_ERR_CONFIG: return "config";
    case MSL_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

msl_status msl_catalog_generate(uint64_t seed, int n_franchises, int items_per_franchise, msl_catalog** out) {
  return guarded([&] {
    need(out, "out");
    *out = new msl_catalog{msl::gen_catalog(seed, n_franchises, items_per_franchise)};
  });
}

void msl_catalog_free(msl_catalog* c) { delete c; }

size_t msl_catalog_item_count(const msl_catalog* c) { return c ? c->catalog.size() : 0; }

size_t msl_catalog_vocab_size(const msl_catalog* c) { return c ? c->catalog.vocab().size() : 0; }

msl_status msl_catalog_item_tokens(const msl_catalog* c, int32_t item, int32_t* out, size_t capacity, size_t* out_len) {
  return guarded([&] {
    need(c, "catalog");
    copy_out(c->catalog.sequence(item), out, capacity, out_len);
  });
}

msl_status msl_catalog_token_text(const msl_catalog* c, int32_t token, const char** out) {
  return guarded([&] {
    need(c, "catalog");
    need(out, "out");
    *out = c->catalog.vocab().token(token).c_str();
  });
}

msl_status msl_catalog_build_prompt(const msl_catalog* c, const int32_t* history, size_t history_len, int32_t* out,
                                    size_t capacity, size_t* out_len) {
  return guarded([&] {
    need(c, "catalog");
    auto h = span_of(history, history_len);
    copy_out(msl::build_prompt(std::vector<msl::ItemId>(h.begin(), h.end()), c->catalog), out, capacity, out_len);
  });
}

msl_status msl_trie_build(const msl_catalog* c, msl_trie** out) {
  return guarded([&] {
    need(c, "catalog");
    need(out, "out");
    *out = new msl_trie{msl::TokenTrie::build(c->catalog.sequences(), msl::Vocab::kEnd)};
  });
}

msl_status msl_trie_build_sequences(const int32_t* tokens, const size_t* lengths, size_t n, msl_trie** out) {
  return guarded([&] {
    need(out, "out");
    if (n > 0) need(lengths, "lengths");
    std::vector<msl::TokenSeq> seqs;
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      auto s = span_of(tokens + off, lengths[i]);
      seqs.emplace_back(s.begin(), s.end());
      off += lengths[i];
    }
    *out = new msl_trie{msl::TokenTrie::build(seqs, msl::Vocab::kEnd)};
  });
}

void msl_trie_free(msl_trie* t) { delete t; }

size_t msl_trie_node_count(const msl_trie* t) { return t ? t->trie.node_count() : 0; }

size_t msl_trie_item_count(const msl_trie* t) { return t ? t->trie.item_count() : 0; }

msl_status msl_trie_valid_next(const msl_trie* t, const int32_t* prefix, size_t prefix_len, int32_t* out, size_t capacity,
                               size_t* out_len) {
  return guarded([&] {
    need(t, "trie");
    copy_out(t->trie.valid_next(span_of(prefix, prefix_len)), out, capacity, out_len);
  });
}

msl_status msl_model_init(uint64_t seed, int d, int vocab_size, double scale, msl_model** out) {
  return guarded([&] {
    need(out, "out");
    auto p = msl::init_params(seed, d, vocab_size, scale);
    auto s = msl::make_optimizer_state(p);
    *out = new msl_model{std::move(p), std::move(s)};
  });
}

msl_status msl_model_load(const char* path, msl_model** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto m = std::make_unique<msl_model>();
    msl::load_checkpoint_file(path, m->params, m->state);
    *out = m.release();
  });
}

msl_status msl_model_save(const msl_model* m, const char* path) {
  return guarded([&] {
    need(m, "model");
    need(path, "path");
    msl::save_checkpoint_file(path, m->params, m->state);
  });
}

void msl_model_free(msl_model* m) { delete m; }

int msl_model_vocab_size(const msl_model* m) { return m ? m->params.vocab : 0; }

msl_status msl_model_forward(const msl_model* m, const int32_t* context, size_t context_len, double* logits, size_t capacity) {
  return guarded([&] {
    need(m, "model");
    need(logits, "logits");
    msl::require(capacity >= static_cast<std::size_t>(m->params.vocab), msl::ErrorCode::InvalidArgument,
                 "logits buffer smaller than the vocabulary");
    auto row = msl::forward(m->params, span_of(context, context_len));
    std::memcpy(logits, row.values.data(), row.values.size() * sizeof(double));
  });
}

msl_status msl_loss_msl(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len, int32_t target,
                        double tau, double alpha, double* loss, double* grad) {
  return guarded([&] {
    need(logits, "logits");
    std::span<const double> f(logits, vocab_size);
    auto v = span_of(valid, valid_len);
    double l = msl::msl_token(f, v, target, tau, alpha);
    if (loss) *loss = l;
    if (grad) msl::msl_grad(f, v, target, tau, alpha, std::span<double>(grad, vocab_size));
  });
}

msl_status msl_loss_lml(const double* logits, size_t vocab_size, int32_t target, double* loss, double* grad) {
  return guarded([&] {
    need(logits, "logits");
    std::span<const double> f(logits, vocab_size);
    double l = msl::lml_token(f, target);
    if (loss) *loss = l;
    if (grad) msl::lml_grad(f, target, 1.0, std::span<double>(grad, vocab_size));
  });
}

msl_status msl_loss_decompose(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len,
                              int32_t target, double* l1, double* l2) {
  return guarded([&] {
    need(logits, "logits");
    auto s = msl::decompose_token(std::span<const double>(logits, vocab_size), span_of(valid, valid_len), target);
    if (l1) *l1 = s.l1;
    if (l2) *l2 = s.l2;
  });
}

msl_status msl_token_weight(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len,
                            int32_t target, double tau, double* weight) {
  return guarded([&] {
    need(logits, "logits");
    need(weight, "weight");
    std::span<const double> f(logits, vocab_size);
    *weight = valid ? msl::token_weight(f, span_of(valid, valid_len), target, tau) : msl::token_weight_full(f, target, tau);
  });
}

msl_status msl_ats_solve_tau(double f_pos, double mu, double sigma2, double m, double eta, int branch_plus, double tau_min,
                             double tau_max, double fallback_tau, msl_tau_estimate* out) {
  return guarded([&] {
    need(out, "out");
    auto e = msl::solve_tau(f_pos, mu, sigma2, m, eta, branch_plus ? msl::RootBranch::Plus : msl::RootBranch::Minus,
                            msl::TauBounds{tau_min, tau_max}, fallback_tau);
    *out = msl_tau_estimate{e.tau,          e.branch == msl::RootBranch::Plus, e.fallback_applied, e.clamped,
                            e.quadratic_residual, e.discriminant, e.root_minus, e.root_plus};
  });
}

double msl_ats_lognormal_probability(double tau, double f_pos, double mu, double sigma2, double m) {
  if (!(tau > 0.0)) return 0.0;
  return msl::validate_tau_lognormal(tau, f_pos, mu, sigma2, m);
}

msl_status msl_beam_search(const msl_model* m, const msl_trie* t, const int32_t* prompt, size_t prompt_len,
                           size_t beam_size, int32_t* items, double* scores, size_t capacity, size_t* out_len) {
  return guarded([&] {
    need(m, "model");
    need(t, "trie");
    auto r = msl::constrained_beam_search(m->params, t->trie, span_of(prompt, prompt_len), msl::BeamOptions{beam_size, false});
    copy_out(r.items, items, capacity, out_len);
    if (scores) copy_out(r.scores, scores, capacity, nullptr);
  });
}

msl_status msl_score_item(const msl_model* m, const msl_trie* t, const int32_t* prompt, size_t prompt_len,
                          const int32_t* item_tokens, size_t item_len, double* score) {
  return guarded([&] {
    need(m, "model");
    need(t, "trie");
    need(score, "score");
    *score = msl::score_item(m->params, t->trie, span_of(prompt, prompt_len), span_of(item_tokens, item_len));
  });
}

msl_status msl_config_resolve(const char* overrides_json, char** config_json) {
  return guarded([&] {
    need(config_json, "config_json");
    msl::RunConfig cfg;
    if (overrides_json && *overrides_json) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(overrides_json);
      } catch (const nlohmann::json::exception& e) {
        msl::fail(msl::ErrorCode::Config, std::string("config is not valid JSON: ") + e.what());
      }
      cfg = msl::config_from_json(j);
    }
    msl::validate_config(cfg);
    *config_json = dup_string(msl::config_to_json(cfg).dump(2));
  });
}

msl_status msl_run(const char* command, const char* config_json, char** summary_json) {
  return guarded([&] {
    need(command, "command");
    msl::RunConfig cfg;
    if (config_json && *config_json) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(config_json);
      } catch (const nlohmann::json::exception& e) {
        msl::fail(msl::ErrorCode::Config, std::string("config is not valid JSON: ") + e.what());
      }
      cfg = msl::config_from_json(j);
    }
    auto out = msl::run_command(command, cfg);
    if (summary_json) *summary_json = dup_string(out.dump(2));
  });
}

void msl_string_free(char* s) { std::free(s); }

}  // extern "C"

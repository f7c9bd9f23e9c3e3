/*
 * C interface to the masked-softmax recommendation toolkit.
 *
 * Objects are opaque handles created by msl_*_create/generate/build calls and
 * released with the matching *_free. Every function returns an msl_status;
 * on failure msl_last_error() describes the problem for the calling thread.
 *
 * Output arrays follow one convention: the caller passes a buffer and its
 * capacity, the library writes min(capacity, n) values and always stores the
 * full length n in *out_len, so a call with capacity 0 queries the size.
 */
#ifndef MSL_MSL_H
#define MSL_MSL_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(MSL_BUILDING_LIBRARY)
#    define MSL_API __declspec(dllexport)
#  else
#    define MSL_API __declspec(dllimport)
#  endif
#else
#  define MSL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum msl_status {
  MSL_OK = 0,
  MSL_ERR_INVALID_ARGUMENT = 1,
  MSL_ERR_CATALOG_INTEGRITY = 2,
  MSL_ERR_NUMERIC = 3,
  MSL_ERR_IO = 4,
  MSL_ERR_CONFIG = 5,
  MSL_ERR_INTERNAL = 6
} msl_status;

typedef struct msl_catalog msl_catalog;
typedef struct msl_trie msl_trie;
typedef struct msl_model msl_model;

MSL_API const char* msl_version(void);
MSL_API const char* msl_last_error(void);
MSL_API const char* msl_status_name(msl_status status);

/* Reserved vocabulary ids. */
#define MSL_TOKEN_PAD 0
#define MSL_TOKEN_SEP 1
#define MSL_TOKEN_ASK 2
#define MSL_TOKEN_END 3

/* ---- catalog ---------------------------------------------------------- */

MSL_API msl_status msl_catalog_generate(uint64_t seed, int n_franchises, int items_per_franchise, msl_catalog** out);
MSL_API void msl_catalog_free(msl_catalog* catalog);
MSL_API size_t msl_catalog_item_count(const msl_catalog* catalog);
MSL_API size_t msl_catalog_vocab_size(const msl_catalog* catalog);
/* END-terminated token sequence of one item. */
MSL_API msl_status msl_catalog_item_tokens(const msl_catalog* catalog, int32_t item, int32_t* out, size_t capacity,
                                           size_t* out_len);
/* Token string for an id; the pointer stays valid while the catalog lives. */
MSL_API msl_status msl_catalog_token_text(const msl_catalog* catalog, int32_t token, const char** out);
MSL_API msl_status msl_catalog_build_prompt(const msl_catalog* catalog, const int32_t* history, size_t history_len,
                                            int32_t* out, size_t capacity, size_t* out_len);

/* ---- trie ------------------------------------------------------------- */

MSL_API msl_status msl_trie_build(const msl_catalog* catalog, msl_trie** out);
/* Trie over arbitrary END-terminated sequences laid out back to back. */
MSL_API msl_status msl_trie_build_sequences(const int32_t* tokens, const size_t* lengths, size_t n_sequences,
                                            msl_trie** out);
MSL_API void msl_trie_free(msl_trie* trie);
MSL_API size_t msl_trie_node_count(const msl_trie* trie);
MSL_API size_t msl_trie_item_count(const msl_trie* trie);
/* Ascending valid next tokens after `prefix`; empty for non-prefixes. */
MSL_API msl_status msl_trie_valid_next(const msl_trie* trie, const int32_t* prefix, size_t prefix_len, int32_t* out,
                                       size_t capacity, size_t* out_len);

/* ---- model ------------------------------------------------------------ */

MSL_API msl_status msl_model_init(uint64_t seed, int d, int vocab_size, double scale, msl_model** out);
MSL_API msl_status msl_model_load(const char* path, msl_model** out);
MSL_API msl_status msl_model_save(const msl_model* model, const char* path);
MSL_API void msl_model_free(msl_model* model);
MSL_API int msl_model_vocab_size(const msl_model* model);
MSL_API msl_status msl_model_forward(const msl_model* model, const int32_t* context, size_t context_len, double* logits,
                                     size_t capacity);

/* ---- losses (one logits row of length vocab_size) ---------------------- */

/* -tau*log(e^{f_y/tau} / (e^{f_y/tau} + alpha * sum_{valid z != y} e^{f_z/tau})); grad may be NULL. */
MSL_API msl_status msl_loss_msl(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len,
                                int32_t target, double tau, double alpha, double* loss, double* grad);
MSL_API msl_status msl_loss_lml(const double* logits, size_t vocab_size, int32_t target, double* loss, double* grad);
MSL_API msl_status msl_loss_decompose(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len,
                                      int32_t target, double* l1, double* l2);
MSL_API msl_status msl_token_weight(const double* logits, size_t vocab_size, const int32_t* valid, size_t valid_len,
                                    int32_t target, double tau, double* weight);

/* ---- adaptive temperature -------------------------------------------- */

typedef struct msl_tau_estimate {
  double tau;
  int branch_plus;       /* 0 = minus root, 1 = plus root */
  int fallback_applied;
  int clamped;
  double quadratic_residual;
  double discriminant;
  double root_minus;
  double root_plus;
} msl_tau_estimate;

MSL_API msl_status msl_ats_solve_tau(double f_pos, double mu, double sigma2, double m, double eta, int branch_plus,
                                     double tau_min, double tau_max, double fallback_tau, msl_tau_estimate* out);
MSL_API double msl_ats_lognormal_probability(double tau, double f_pos, double mu, double sigma2, double m);

/* ---- decoding ----------------------------------------------------------- */

MSL_API msl_status msl_beam_search(const msl_model* model, const msl_trie* trie, const int32_t* prompt, size_t prompt_len,
                                   size_t beam_size, int32_t* items, double* scores, size_t capacity, size_t* out_len);
MSL_API msl_status msl_score_item(const msl_model* model, const msl_trie* trie, const int32_t* prompt, size_t prompt_len,
                                  const int32_t* item_tokens, size_t item_len, double* score);

/* ---- experiment harness ------------------------------------------------- */

/* Runs a CLI subcommand ("train", "compare", ...) with a JSON RunConfig.
 * *summary_json receives a JSON report to release with msl_string_free. */
MSL_API msl_status msl_run(const char* command, const char* config_json, char** summary_json);
/* Fills *config_json with the default RunConfig merged with `overrides_json` (may be NULL). */
MSL_API msl_status msl_config_resolve(const char* overrides_json, char** config_json);
MSL_API void msl_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* MSL_MSL_H */

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "msl/msl.h"

extern "C" int msl_c_header_smoke(void);

namespace {

struct Fixture {
  msl_catalog* catalog = nullptr;
  msl_trie* trie = nullptr;
  msl_model* model = nullptr;

  Fixture() {
    REQUIRE(msl_catalog_generate(42, 3, 4, &catalog) == MSL_OK);
    REQUIRE(msl_trie_build(catalog, &trie) == MSL_OK);
    REQUIRE(msl_model_init(7, 8, static_cast<int>(msl_catalog_vocab_size(catalog)), 0.5, &model) == MSL_OK);
  }
  ~Fixture() {
    msl_model_free(model);
    msl_trie_free(trie);
    msl_catalog_free(catalog);
  }
};

}  // namespace

TEST_CASE("header compiles as C") { CHECK(msl_c_header_smoke() == 1); }

TEST_CASE("version and status names") {
  CHECK(std::strlen(msl_version()) > 0);
  CHECK(std::string(msl_status_name(MSL_OK)) == "ok");
  CHECK(std::string(msl_status_name(MSL_ERR_CATALOG_INTEGRITY)) == "catalog integrity");
}

TEST_CASE("catalog and trie through handles") {
  Fixture f;
  CHECK(msl_catalog_item_count(f.catalog) == 12);
  CHECK(msl_trie_item_count(f.trie) == 12);

  size_t n = 0;
  CHECK(msl_catalog_item_tokens(f.catalog, 0, nullptr, 0, &n) == MSL_OK);
  REQUIRE(n >= 2);
  std::vector<int32_t> seq(n);
  CHECK(msl_catalog_item_tokens(f.catalog, 0, seq.data(), seq.size(), &n) == MSL_OK);
  CHECK(seq.back() == MSL_TOKEN_END);

  const char* text = nullptr;
  CHECK(msl_catalog_token_text(f.catalog, MSL_TOKEN_END, &text) == MSL_OK);
  CHECK(std::string(text) == "<end>");

  std::vector<int32_t> next(64);
  CHECK(msl_trie_valid_next(f.trie, seq.data(), 1, next.data(), next.size(), &n) == MSL_OK);
  CHECK(n >= 1);

  CHECK(msl_catalog_item_tokens(f.catalog, 99, seq.data(), seq.size(), &n) == MSL_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(msl_last_error()) > 0);
}

TEST_CASE("duplicate sequences are a catalog-integrity error") {
  const int32_t toks[] = {5, MSL_TOKEN_END, 5, MSL_TOKEN_END};
  const size_t lens[] = {2, 2};
  msl_trie* t = nullptr;
  CHECK(msl_trie_build_sequences(toks, lens, 2, &t) == MSL_ERR_CATALOG_INTEGRITY);
  CHECK(t == nullptr);
}

TEST_CASE("losses through the C API") {
  const double f[] = {2, 1, 0, -1};
  const int32_t valid[] = {0, 1};
  double loss = 0, grad[4];
  CHECK(msl_loss_msl(f, 4, valid, 2, 1, 1.0, 1.0, &loss, grad) == MSL_OK);
  CHECK(loss == doctest::Approx(1.3132616875).epsilon(1e-9));
  CHECK(grad[0] + grad[1] == doctest::Approx(0.0).scale(1));
  CHECK(grad[2] == 0.0);

  double l1 = 0, l2 = 0, lml = 0;
  CHECK(msl_loss_decompose(f, 4, valid, 2, 1, &l1, &l2) == MSL_OK);
  CHECK(msl_loss_lml(f, 4, 1, &lml, nullptr) == MSL_OK);
  CHECK(l1 + l2 == doctest::Approx(lml).epsilon(1e-12));

  double wm = 0, wl = 0;
  CHECK(msl_token_weight(f, 4, valid, 2, 1, 1.0, &wm) == MSL_OK);
  CHECK(msl_token_weight(f, 4, nullptr, 0, 1, 1.0, &wl) == MSL_OK);
  CHECK(wm <= wl);

  CHECK(msl_loss_msl(f, 4, valid, 2, 1, -1.0, 1.0, &loss, nullptr) == MSL_ERR_INVALID_ARGUMENT);
}

TEST_CASE("ATS through the C API") {
  msl_tau_estimate e{};
  CHECK(msl_ats_solve_tau(5.0, 0.0, 1.0, 54.38, 0.25, 1, 0.05, 20.0, 1.0, &e) == MSL_OK);
  CHECK(e.tau == doctest::Approx(1.8102).epsilon(1e-4));
  CHECK(msl_ats_lognormal_probability(e.tau, 5.0, 0.0, 1.0, 54.38) == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(msl_ats_solve_tau(5.0, 0.0, 1.0, 54.38, 1.5, 0, 0.05, 20.0, 1.0, &e) == MSL_ERR_INVALID_ARGUMENT);
}

TEST_CASE("beam search, scoring and checkpoints") {
  Fixture f;
  const int32_t hist[] = {1, 5};
  std::vector<int32_t> prompt(256);
  size_t plen = 0;
  REQUIRE(msl_catalog_build_prompt(f.catalog, hist, 2, prompt.data(), prompt.size(), &plen) == MSL_OK);
  CHECK(prompt[plen - 1] == MSL_TOKEN_ASK);

  std::vector<int32_t> items(12);
  std::vector<double> scores(12);
  size_t n = 0;
  REQUIRE(msl_beam_search(f.model, f.trie, prompt.data(), plen, 12, items.data(), scores.data(), 12, &n) == MSL_OK);
  REQUIRE(n == 12);
  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    total += std::exp(scores[i]);
    std::vector<int32_t> seq(32);
    size_t slen = 0;
    REQUIRE(msl_catalog_item_tokens(f.catalog, items[i], seq.data(), seq.size(), &slen) == MSL_OK);
    double s = 0;
    REQUIRE(msl_score_item(f.model, f.trie, prompt.data(), plen, seq.data(), slen, &s) == MSL_OK);
    CHECK(s == scores[i]);
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  auto path = (std::filesystem::temp_directory_path() / "msl_capi_test.ckpt").string();
  REQUIRE(msl_model_save(f.model, path.c_str()) == MSL_OK);
  msl_model* back = nullptr;
  REQUIRE(msl_model_load(path.c_str(), &back) == MSL_OK);
  int V = msl_model_vocab_size(back);
  std::vector<double> a(static_cast<size_t>(V)), b(static_cast<size_t>(V));
  CHECK(msl_model_forward(f.model, prompt.data(), plen, a.data(), a.size()) == MSL_OK);
  CHECK(msl_model_forward(back, prompt.data(), plen, b.data(), b.size()) == MSL_OK);
  CHECK(a == b);
  msl_model_free(back);
  CHECK(msl_model_load("/nonexistent/ckpt", &back) == MSL_ERR_IO);
}

TEST_CASE("harness entry points") {
  char* cfg = nullptr;
  REQUIRE(msl_config_resolve("{\"epochs\": 3}", &cfg) == MSL_OK);
  CHECK(std::string(cfg).find("\"epochs\": 3") != std::string::npos);
  msl_string_free(cfg);

  CHECK(msl_config_resolve("{\"bogus\": 1}", &cfg) == MSL_ERR_CONFIG);
  CHECK(msl_config_resolve("{not json", &cfg) == MSL_ERR_CONFIG);

  char* summary = nullptr;
  auto out = (std::filesystem::temp_directory_path() / "msl_capi_run").string();
  std::string conf = "{\"bench_sizes\": [10, 100], \"outdir\": \"" + out + "\"}";
  REQUIRE(msl_run("bench-trie", conf.c_str(), &summary) == MSL_OK);
  CHECK(std::string(summary).find("rows") != std::string::npos);
  msl_string_free(summary);
  CHECK(msl_run("no-such-command", "{}", &summary) != MSL_OK);
}

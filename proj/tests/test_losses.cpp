#include <cmath>
#include <random>

#include "doctest.h"
#include "losses.hpp"
#include "oracles.hpp"
#include "token_trie.hpp"

using namespace msl;
using doctest::Approx;

namespace {

const std::vector<double> kRow{2, 1, 0, -1};

std::vector<double> shifted(std::vector<double> f, double c) {
  for (auto& v : f) v += c;
  return f;
}

}  // namespace

TEST_CASE("masked_softmax examples") {
  auto p = masked_softmax(kRow, std::vector<TokenId>{0, 1});
  CHECK(p[0] == Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(p[1] == Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(p[2] == 0.0);
  CHECK(p[3] == 0.0);

  std::vector<double> flat(6, 0.3);
  auto u = masked_softmax(flat, std::vector<TokenId>{0, 2, 3, 5});
  for (TokenId z : {0, 2, 3, 5}) CHECK(u[static_cast<std::size_t>(z)] == Approx(0.25));

  auto hot = masked_softmax(kRow, std::vector<TokenId>{0, 1, 2, 3}, 1e6);
  for (double v : hot) CHECK(std::abs(v - 0.25) < 1e-5);

  CHECK_THROWS_AS(masked_softmax(kRow, std::vector<TokenId>{}), Error);
  CHECK_THROWS_AS(masked_softmax(kRow, std::vector<TokenId>{0}, 0.0), Error);
}

TEST_CASE("masked_softmax survives huge logits") {
  std::vector<double> big{1000, 999, -1000};
  auto p = masked_softmax(big, std::vector<TokenId>{0, 1, 2});
  CHECK(p[0] + p[1] + p[2] == Approx(1.0));
  CHECK(std::isfinite(msl_token(big, std::vector<TokenId>{0, 1, 2}, 1)));
  CHECK(std::isfinite(lml_token(big, 2)));
}

TEST_CASE("lml examples") {
  std::vector<double> flat(4, 0.0);
  CHECK(lml_token(flat, 2) == Approx(std::log(4.0)));
  std::vector<double> hot{20, 0, 0, 0};
  CHECK(lml_token(hot, 0) < 1e-8);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    auto in = oracle::random_instance(rng);
    CHECK(lml_token(in.logits, in.target) == Approx(oracle::lml(in.logits, in.target)).epsilon(1e-12));
  }
}

TEST_CASE("decomposition examples and identity") {
  std::vector<double> flat(4, 0.0);
  auto s = decompose_token(flat, std::vector<TokenId>{0, 1}, 0);
  CHECK(s.l1 == Approx(std::log(2.0)));
  CHECK(s.l2 == Approx(std::log(2.0)));

  auto full = decompose_token(kRow, std::vector<TokenId>{0, 1, 2, 3}, 2);
  CHECK(std::abs(full.l1) < 1e-15);
  CHECK(full.l2 == Approx(lml_token(kRow, 2)));

  std::mt19937_64 rng(2);
  for (int i = 0; i < 1000; ++i) {
    auto in = oracle::random_instance(rng);
    auto d = decompose_token(in.logits, in.valid, in.target);
    double lml = lml_token(in.logits, in.target);
    REQUIRE(std::abs(d.l1 + d.l2 - lml) <= 1e-9 * std::max(1.0, lml));
    CHECK(d.l1 >= -1e-15);
    CHECK(d.l2 >= -1e-15);
  }
  CHECK_THROWS_AS(decompose_token(kRow, std::vector<TokenId>{0, 1}, 3), Error);
}

TEST_CASE("msl_token examples") {
  CHECK(msl_token(kRow, std::vector<TokenId>{0, 1}, 1) == Approx(1.3132616875182228).epsilon(1e-12));
  for (double tau : {0.1, 1.0, 7.0}) CHECK(msl_token(kRow, std::vector<TokenId>{2}, 2, tau) == 0.0);
  CHECK(msl_token(kRow, std::vector<TokenId>{0, 1, 2, 3}, 3) == Approx(lml_token(kRow, 3)).epsilon(1e-14));
  CHECK_THROWS_AS(msl_token(kRow, std::vector<TokenId>{0, 1}, 1, 0.0), Error);
  CHECK_THROWS_AS(msl_token(kRow, std::vector<TokenId>{}, 1), Error);
  CHECK_THROWS_AS(msl_token(kRow, std::vector<TokenId>{0, 1}, 2), Error);
}

TEST_CASE("msl_token matches the direct formula for all tau and alpha") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 500; ++i) {
    auto in = oracle::random_instance(rng);
    for (double tau : {0.25, 1.0, 3.0}) {
      for (double alpha : {1.0, negative_coefficient(in.logits.size(), in.valid.size())}) {
        double ours = msl_token(in.logits, in.valid, in.target, tau, alpha);
        double ref = oracle::msl(in.logits, in.valid, in.target, tau, alpha);
        CHECK(ours == Approx(ref).epsilon(1e-10));
        CHECK(ours >= 0.0);
      }
    }
  }
}

TEST_CASE("msl <= lml at tau 1, equality only for a full mask") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    auto in = oracle::random_instance(rng);
    double m = msl_token(in.logits, in.valid, in.target);
    double l = lml_token(in.logits, in.target);
    CHECK(m <= l + 1e-12);
    if (in.valid.size() < in.logits.size()) CHECK(m < l);
  }
}

TEST_CASE("losses are invariant to a constant logit shift") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    auto in = oracle::random_instance(rng);
    auto g = shifted(in.logits, 37.5);
    CHECK(lml_token(g, in.target) == Approx(lml_token(in.logits, in.target)).epsilon(1e-9));
    CHECK(msl_token(g, in.valid, in.target, 0.7) == Approx(msl_token(in.logits, in.valid, in.target, 0.7)).epsilon(1e-9));
    auto a = decompose_token(g, in.valid, in.target), b = decompose_token(in.logits, in.valid, in.target);
    CHECK(std::abs(a.l1 - b.l1) <= 1e-9 * std::max(1.0, b.l1));
  }
}

TEST_CASE("weights") {
  // p(target) = 0.9 -> w = 0.1
  std::vector<double> f{std::log(9.0), 0.0};
  CHECK(token_weight(f, std::vector<TokenId>{0, 1}, 0) == Approx(0.1));
  CHECK(token_weight_full(f, 0) == Approx(0.1));
  std::vector<double> flat(10, 1.0);
  CHECK(token_weight(flat, std::vector<TokenId>{1, 2, 3, 4}, 2) == Approx(0.75));

  std::mt19937_64 rng(6);
  for (int i = 0; i < 1000; ++i) {
    auto in = oracle::random_instance(rng);
    double wm = token_weight(in.logits, in.valid, in.target);
    double wl = token_weight_full(in.logits, in.target);
    CHECK(wm >= 0.0);
    CHECK(wm < 1.0);
    CHECK(wm <= wl);
  }
}

TEST_CASE("gradient examples") {
  std::vector<double> flat(4, 0.0);
  auto g = msl_grad(flat, std::vector<TokenId>{0, 1}, 0);
  CHECK(g[0] == Approx(-0.5));
  CHECK(g[1] == Approx(0.5));
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);

  std::vector<double> sat{40, 0, 0, 0};
  auto s = msl_grad(sat, std::vector<TokenId>{0, 1, 2}, 0);
  double n = 0;
  for (double v : s) n += v * v;
  CHECK(std::sqrt(n) < 1e-6);
}

TEST_CASE("logit gradients match central finite differences") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; ++i) {
    auto in = oracle::random_instance(rng, 2, 12, 2.0);
    const std::size_t V = in.logits.size();
    for (double tau : {0.3, 1.0, 2.5}) {
      for (double alpha : {1.0, negative_coefficient(V, in.valid.size())}) {
        auto g = msl_grad(in.logits, in.valid, in.target, tau, alpha);
        auto fn = [&](const std::vector<double>& f) { return msl_token(f, in.valid, in.target, tau, alpha); };
        double sum = 0;
        for (std::size_t z = 0; z < V; ++z) {
          CHECK(std::abs(g[z] - oracle::central_diff(fn, in.logits, z)) < 1e-6);
          sum += g[z];
        }
        if (alpha == 1.0) CHECK(std::abs(sum) < 1e-12);
      }

      std::vector<double> gl(V);
      lml_grad(in.logits, in.target, tau, gl);
      auto fl = [&](const std::vector<double>& f) {
        return -tau * (f[static_cast<std::size_t>(in.target)] / tau - log_sum_exp(f, tau));
      };
      for (std::size_t z = 0; z < V; ++z) CHECK(std::abs(gl[z] - oracle::central_diff(fl, in.logits, z)) < 1e-6);
    }
    std::vector<double> g1(V);
    l1_grad(in.logits, in.valid, g1);
    auto f1 = [&](const std::vector<double>& f) { return decompose_token(f, in.valid, in.target).l1; };
    for (std::size_t z = 0; z < V; ++z) CHECK(std::abs(g1[z] - oracle::central_diff(f1, in.logits, z)) < 1e-6);
  }
}

TEST_CASE("invalid coordinates receive exactly zero gradient") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    auto in = oracle::random_instance(rng);
    auto g = msl_grad(in.logits, in.valid, in.target, 1.7, 3.0);
    for (std::size_t z = 0; z < g.size(); ++z)
      if (!std::binary_search(in.valid.begin(), in.valid.end(), static_cast<TokenId>(z))) CHECK(g[z] == 0.0);
  }
}

TEST_CASE("sequence forms and breakdown") {
  auto t = TokenTrie::build({{4, 5, 3}, {4, 6, 3}, {7, 3}}, 3);
  TokenSeq target{4, 6, 3};
  auto mask = masks_for_target(t, target, 8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0, 1);
  LogitsSeq rows(3, std::vector<double>(8));
  for (auto& r : rows)
    for (auto& v : r) v = g(rng);

  auto l = lml_loss(rows, target);
  auto d = decompose_lml(rows, target, mask);
  auto m = msl_loss(rows, target, mask, 1.0);
  REQUIRE(l.size() == 3);
  CHECK(m[2] == 0.0);  // END is forced after {4, 6}
  for (std::size_t i = 0; i < 3; ++i) CHECK(d[i].l1 + d[i].l2 == Approx(l[i]).epsilon(1e-12));

  auto br = loss_breakdown(rows, target, mask, 0.5);
  REQUIRE(br.tokens.size() == 3);
  CHECK(br.sum.lml == Approx(l[0] + l[1] + l[2]));
  CHECK(br.mean.lml == Approx((l[0] + l[1] + l[2]) / 3));
  CHECK(br.mean.tau == Approx(0.5));
  CHECK(br.sum.valid_count == 2 + 2 + 1);
  for (const auto& tk : br.tokens) CHECK(tk.weight_msl <= tk.weight_lml);

  CHECK_THROWS_AS(lml_loss(LogitsSeq(2, std::vector<double>(8)), target), Error);
}

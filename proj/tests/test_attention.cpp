#include "ptrack/attention.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "ptrack/errors.hpp"

using namespace ptrack;

namespace {

// Quadratic-cost reference: materializes the full normalized kernel weight
// matrix per head instead of factoring through the d x d summary.
std::vector<double> dense_attention(const Tensor<double>& q, const Tensor<double>& k,
                                    const Tensor<double>& v, const AttentionParams<double>& p,
                                    std::vector<std::vector<double>>* weights_out = nullptr) {
  const std::size_t nq = q.rows(), nk = k.rows(), c = p.channels, d = c / p.heads;
  std::vector<double> heads(nq * c);
  if (weights_out) weights_out->clear();
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = elu1(matmul(q, p.w_q[h]));
    auto kh = elu1(matmul(k, p.w_k[h]));
    auto vh = matmul(v, p.w_v[h]);
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> w(nk);
      double total = 0;
      for (std::size_t j = 0; j < nk; ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < d; ++e) dot += qh(i, e) * kh(j, e);
        w[j] = dot;
        total += dot;
      }
      for (auto& x : w) x /= total;
      if (weights_out) weights_out->push_back(w);
      for (std::size_t e = 0; e < d; ++e) {
        double acc = 0;
        for (std::size_t j = 0; j < nk; ++j) acc += w[j] * vh(j, e);
        heads[i * c + h * d + e] = acc;
      }
    }
  }
  auto mixed = matmul(Tensor<double>::from({nq, c}, heads), p.w_o);
  return mixed.values();
}

ParamList<double> attn_param_list(AttentionParams<double>& p) {
  ParamList<double> out;
  collect_params("attn", p, out);
  return out;
}

Tensor<double> permute_rows(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  NoGradGuard guard;
  return gather_rows(x, perm);
}

}  // namespace

TEST_CASE("pos_embed: zero weights give zero, equal coords give equal rows") {
  Rng rng(1);
  auto p = make_pos_embed_params<double>(8, rng);
  for (auto& v : p.w1.values_mut()) v = 0;
  for (auto& v : p.w2.values_mut()) v = 0;
  auto out = pos_embed(Tensor<double>::from({2, 3}, {1, 2, 3, -4, 0, 2}), p);
  for (double v : out.values()) CHECK(v == 0.0);

  auto q = make_pos_embed_params<double>(8, rng);
  auto emb = pos_embed(Tensor<double>::from({3, 3}, {1, 2, 3, 5, 5, 5, 1, 2, 3}), q);
  for (std::size_t j = 0; j < 8; ++j) CHECK(emb(0, j) == emb(2, j));
  CHECK_THROWS_AS(pos_embed(Tensor<double>::from({2, 2}, {1, 2, 3, 4}), q), DimensionError);
}

TEST_CASE("pos_embed gradient check") {
  Rng rng(2);
  auto p = make_pos_embed_params<double>(6, rng);
  auto coords = uniform_tensor<double>({8, 3}, -2.0, 2.0, rng);
  ParamList<double> params;
  collect_params("pos", p, params);
  auto loss = [&] { return sum_all(square(pos_embed(coords, p))); };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  CHECK(report.all_passed);
  CHECK(report.worst < 1e-5);
}

TEST_CASE("linear_attention: single key means every query copies the value") {
  Rng rng(3);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto q = uniform_tensor<double>({5, 8}, -1.0, 1.0, rng);
  auto k = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto v = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto out = linear_attention(q, k, v, p);

  auto vh0 = matmul(v, p.w_v[0]);
  auto vh1 = matmul(v, p.w_v[1]);
  auto want = matmul(concat_cols(vh0, vh1), p.w_o);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(out(i, j) == doctest::Approx(want(0, j)).epsilon(1e-12));
}

TEST_CASE("linear_attention: identical keys average the values") {
  Rng rng(4);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto q = uniform_tensor<double>({3, 8}, -1.0, 1.0, rng);
  auto key_row = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto k = repeat_rows(key_row, 6);
  auto v = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);
  auto out = linear_attention(q, k, v, p);

  auto mean_v = mul_scalar(col_sums(v), 1.0 / 6.0);
  auto want = matmul(concat_cols(matmul(mean_v, p.w_v[0]), matmul(mean_v, p.w_v[1])), p.w_o);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(out(i, j) == doctest::Approx(want(0, j)).epsilon(1e-10));
}

TEST_CASE("linear_attention matches the dense oracle; weights are a distribution") {
  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t nq = 4 + trial, nk = 6 + 2 * trial, c = 8;
    auto p = make_attention_params<double>(c, 2, true, rng);
    auto q = uniform_tensor<double>({nq, c}, -1.5, 1.5, rng);
    auto k = uniform_tensor<double>({nk, c}, -1.5, 1.5, rng);
    auto v = uniform_tensor<double>({nk, c}, -1.5, 1.5, rng);

    std::vector<std::vector<double>> weights;
    auto want = dense_attention(q, k, v, p, &weights);
    auto got = linear_attention(q, k, v, p);
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(std::abs(got.values()[i] - want[i]) < 1e-10);

    for (const auto& row : weights) {
      double sum = 0;
      for (double w : row) {
        CHECK(w > 0.0);
        sum += w;
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("linear_attention stays an oracle match up to N=64") {
  Rng rng(6);
  auto p = make_attention_params<double>(16, 2, true, rng);
  auto q = uniform_tensor<double>({64, 16}, -2.0, 2.0, rng);
  auto k = uniform_tensor<double>({64, 16}, -2.0, 2.0, rng);
  auto v = uniform_tensor<double>({64, 16}, -2.0, 2.0, rng);
  auto want = dense_attention(q, k, v, p);
  auto got = linear_attention(q, k, v, p);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.values()[i] - want[i]) < 1e-10);
}

TEST_CASE("linear_attention input validation") {
  Rng rng(7);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto q = uniform_tensor<double>({2, 8}, -1.0, 1.0, rng);
  auto k = uniform_tensor<double>({3, 8}, -1.0, 1.0, rng);
  auto v = uniform_tensor<double>({2, 8}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(linear_attention(q, k, v, p), DimensionError);
  auto k0 = Tensor<double>::zeros({0, 8});
  auto v0 = Tensor<double>::zeros({0, 8});
  CHECK_THROWS_AS(linear_attention(q, k0, v0, p), ParameterError);
  CHECK_THROWS_AS(make_attention_params<double>(9, 2, true, rng), ParameterError);
}

TEST_CASE("self_attention: single token reduces to a projected residual") {
  Rng rng(8);
  auto p = make_attention_params<double>(8, 2, false, rng);
  auto tok = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto pos = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto out = self_attention(tok, pos, p);
  auto mixed = add(tok, pos);
  auto want = add(tok, linear_attention(mixed, mixed, mixed, p));
  for (std::size_t j = 0; j < 8; ++j) CHECK(out(0, j) == want(0, j));
}

TEST_CASE("self_attention is permutation-equivariant within 1e-12") {
  Rng rng(9);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto tok = uniform_tensor<double>({10, 8}, -1.0, 1.0, rng);
  auto pos = uniform_tensor<double>({10, 8}, -1.0, 1.0, rng);
  std::vector<std::size_t> perm{7, 3, 0, 9, 1, 5, 2, 8, 6, 4};

  auto base = self_attention(tok, pos, p);
  auto permuted = self_attention(permute_rows(tok, perm), permute_rows(pos, perm), p);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(permuted(i, j) == doctest::Approx(base(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("cross_attention: one kv row dominates; kv order does not matter") {
  Rng rng(10);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto q = uniform_tensor<double>({4, 8}, -1.0, 1.0, rng);
  auto kv1 = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto pos1 = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto out1 = cross_attention(q, kv1, pos1, p);
  // With a single kv row every query receives the same attended vector.
  auto vrow = add(kv1, pos1);
  auto want = matmul(concat_cols(matmul(vrow, p.w_v[0]), matmul(vrow, p.w_v[1])), p.w_o);
  auto expect = layer_norm(add(q, repeat_rows(want, 4)), p.gamma, p.beta);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(out1(i, j) == doctest::Approx(expect(i, j)).epsilon(1e-12));

  auto kv = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);
  auto pos = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);
  std::vector<std::size_t> perm{5, 2, 0, 4, 1, 3};
  auto a = cross_attention(q, kv, pos, p);
  auto b = cross_attention(q, permute_rows(kv, perm), permute_rows(pos, perm), p);
  for (std::size_t i = 0; i < a.numel(); ++i)
    CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-12));
}

TEST_CASE("gradient checks: self and cross attention parameters") {
  Rng rng(11);
  auto p = make_attention_params<double>(8, 2, true, rng);
  auto tok = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);
  auto pos = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);
  auto params = attn_param_list(p);

  auto self_loss = [&] { return sum_all(square(self_attention(tok, pos, p))); };
  auto self_report = finite_diff_check<double>(self_loss, params, 1e-5, 1e-5);
  CHECK(self_report.all_passed);

  auto q = uniform_tensor<double>({4, 8}, -1.0, 1.0, rng);
  auto cross_loss = [&] { return sum_all(square(cross_attention(q, tok, pos, p))); };
  auto cross_report = finite_diff_check<double>(cross_loss, params, 1e-5, 1e-5);
  CHECK(cross_report.all_passed);
}

TEST_CASE("gradient flows into attention inputs") {
  Rng rng(12);
  auto p = make_attention_params<double>(8, 2, true, rng);
  ParamList<double> params{{"tok", uniform_tensor<double>({5, 8}, -1.0, 1.0, rng)},
                           {"pos", uniform_tensor<double>({5, 8}, -1.0, 1.0, rng)}};
  params[0].second.set_requires_grad(true);
  params[1].second.set_requires_grad(true);
  auto loss = [&] {
    return sum_all(square(self_attention(params[0].second, params[1].second, p)));
  };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  CHECK(report.all_passed);
}

TEST_CASE("norm flag switches the output family") {
  Rng rng(13);
  auto with_norm = make_attention_params<double>(8, 2, true, rng);
  auto no_norm = with_norm;
  no_norm.use_norm = false;
  auto tok = uniform_tensor<double>({4, 8}, -1.0, 1.0, rng);
  auto pos = uniform_tensor<double>({4, 8}, -1.0, 1.0, rng);
  auto a = self_attention(tok, pos, with_norm);
  auto b = self_attention(tok, pos, no_norm);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.numel(); ++i) any_diff = any_diff || a.values()[i] != b.values()[i];
  CHECK(any_diff);
}

#include "ptrack/correlation.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ptrack/errors.hpp"

using namespace ptrack;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng, double extent = 3.0) {
  PointCloud pc;
  pc.coords.reserve(3 * n);
  for (std::size_t i = 0; i < 3 * n; ++i) pc.coords.push_back(rng.uniform(-extent, extent));
  return pc;
}

FusionMap<double> make_map(std::size_t n, std::size_t c, Rng& rng) {
  FusionMap<double> m;
  m.coords = random_cloud(n, rng);
  m.features = uniform_tensor<double>({n, c}, -1.0, 1.0, rng);
  return m;
}

}  // namespace

TEST_CASE("cross_feature_aug: single template point broadcasts one payload") {
  Rng rng(1);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto search = make_map(6, 8, rng);
  PointCloud tc;
  tc.coords = {0.3, -0.2, 0.8};
  auto tf = uniform_tensor<double>({1, 8}, -1.0, 1.0, rng);
  auto out = cross_feature_aug(search, tf, tc, params.iters[0]);
  CHECK(out.stage == "coarse");
  REQUIRE(out.features.shape() == Shape{6, 8});
  // Undo the normalization by comparing against a direct recomputation with
  // use_norm toggled off: the attended payload must be row-constant.
  auto raw = params.iters[0];
  raw.cross_attn.use_norm = false;
  auto plain = cross_feature_aug(search, tf, tc, raw);
  for (std::size_t i = 1; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(plain.features(i, j) - search.features(i, j) ==
            doctest::Approx(plain.features(0, j) - search.features(0, j)).epsilon(1e-12));
}

TEST_CASE("cross_feature_aug is invariant to template permutation") {
  Rng rng(2);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto search = make_map(10, 8, rng);
  auto tmpl_cloud = random_cloud(7, rng);
  auto tf = uniform_tensor<double>({7, 8}, -1.0, 1.0, rng);

  auto base = cross_feature_aug(search, tf, tmpl_cloud, params.iters[0]);
  std::vector<std::size_t> perm{6, 2, 0, 5, 1, 4, 3};
  PointCloud pc;
  for (std::size_t i : perm)
    pc.coords.insert(pc.coords.end(), tmpl_cloud.coords.begin() + 3 * i,
                     tmpl_cloud.coords.begin() + 3 * i + 3);
  NoGradGuard guard;
  auto ptf = gather_rows(tf, perm);
  auto permuted = cross_feature_aug(search, ptf, pc, params.iters[0]);
  for (std::size_t i = 0; i < base.features.numel(); ++i)
    CHECK(permuted.features.values()[i] ==
          doctest::Approx(base.features.values()[i]).epsilon(1e-12));
}

TEST_CASE("cross_feature_aug rejects an empty template") {
  Rng rng(3);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto search = make_map(5, 8, rng);
  PointCloud empty;
  auto tf = Tensor<double>::zeros({0, 8});
  CHECK_THROWS_AS(cross_feature_aug(search, tf, empty, params.iters[0]), ParameterError);
}

TEST_CASE("gradient check: cross_feature_aug on a 16/8 toy") {
  Rng rng(4);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto search = make_map(16, 8, rng);
  auto tmpl_cloud = random_cloud(8, rng);
  auto tf = uniform_tensor<double>({8, 8}, -1.0, 1.0, rng);
  ParamList<double> plist;
  collect_params("corr", params, plist);
  auto loss = [&] {
    return sum_all(square(cross_feature_aug(search, tf, tmpl_cloud, params.iters[0]).features));
  };
  auto report = finite_diff_check<double>(loss, plist, 1e-5, 1e-5);
  CHECK(report.all_passed);
}

TEST_CASE("ego_feature_aug: identical rows stay identical") {
  Rng rng(5);
  auto params = make_correlation_params<double>(8, 2, true, 3, 1, rng);
  FusionMap<double> fused;
  fused.coords = PointCloud{};
  // identical features but distinct coordinates
  fused.coords = random_cloud(6, rng);
  fused.features = repeat_rows(uniform_tensor<double>({1, 8}, -1.0, 1.0, rng), 6);
  auto out = ego_feature_aug(fused, params.iters[0], 3);
  CHECK(out.stage == "refined");
  CHECK(out.iteration == 1);
  REQUIRE(out.features.shape() == Shape{6, 8});
  // Identical features with tie-broken index-order graphs produce rows that
  // differ only through each point's own positional embedding, so rows with
  // the same coordinates would match; instead check the graph fell back to
  // index order by verifying determinism across two runs.
  auto again = ego_feature_aug(fused, params.iters[0], 3);
  for (std::size_t i = 0; i < out.features.numel(); ++i)
    CHECK(out.features.values()[i] == again.features.values()[i]);

  // With identical coords as well, all outputs collapse to one row.
  FusionMap<double> flat;
  flat.coords.coords.assign(18, 0.5);
  flat.features = fused.features;
  auto collapsed = ego_feature_aug(flat, params.iters[0], 3);
  for (std::size_t i = 1; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(collapsed.features(i, j) == doctest::Approx(collapsed.features(0, j)).epsilon(1e-12));
}

TEST_CASE("ego_feature_aug with K = N equals dense self-attention") {
  Rng rng(6);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto fused = make_map(12, 8, rng);
  auto out = ego_feature_aug(fused, params.iters[0], 12);

  auto pos = pos_embed(coords_tensor<double>(fused.coords), params.iters[0].ego_pos);
  auto dense = self_attention(fused.features, pos, params.iters[0].ego_attn);
  for (std::size_t i = 0; i < dense.numel(); ++i)
    CHECK(out.features.values()[i] == doctest::Approx(dense.values()[i]).epsilon(1e-9));
}

TEST_CASE("ego_feature_aug validates K") {
  Rng rng(7);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto fused = make_map(5, 8, rng);
  CHECK_THROWS_AS(ego_feature_aug(fused, params.iters[0], 6), ParameterError);
  CHECK_THROWS_AS(make_correlation_params<double>(8, 2, true, 0, 1, rng), ParameterError);
}

TEST_CASE("gradient check: ego_feature_aug on N=16, K=4") {
  Rng rng(8);
  auto params = make_correlation_params<double>(8, 2, true, 4, 1, rng);
  auto fused = make_map(16, 8, rng);
  ParamList<double> plist;
  collect_params("corr", params, plist);
  auto loss = [&] { return sum_all(square(ego_feature_aug(fused, params.iters[0], 4).features)); };
  auto report = finite_diff_check<double>(loss, plist, 1e-5, 1e-5);
  INFO("worst ", report.worst);
  CHECK(report.all_passed);
}

TEST_CASE("correlate: one iteration unrolls to cross + ego") {
  Rng rng(9);
  auto params = make_correlation_params<double>(8, 2, true, 4, 2, rng);
  auto search = make_map(14, 8, rng);
  auto tmpl_cloud = random_cloud(6, rng);
  auto tf = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);

  auto one = correlate(search.features, tf, search.coords, tmpl_cloud, params, 1);
  auto manual =
      ego_feature_aug(cross_feature_aug(search, tf, tmpl_cloud, params.iters[0]),
                      params.iters[0], params.k);
  REQUIRE(one.features.shape() == manual.features.shape());
  for (std::size_t i = 0; i < one.features.numel(); ++i)
    CHECK(one.features.values()[i] == manual.features.values()[i]);
  CHECK(one.iteration == 1);

  auto two = correlate(search.features, tf, search.coords, tmpl_cloud, params, 2);
  CHECK(two.iteration == 2);
  CHECK(two.features.shape() == Shape{14, 8});
  bool differs = false;
  for (std::size_t i = 0; i < two.features.numel(); ++i)
    differs = differs || two.features.values()[i] != one.features.values()[i];
  CHECK(differs);

  CHECK_THROWS_AS(correlate(search.features, tf, search.coords, tmpl_cloud, params, 0),
                  ParameterError);
  CHECK_THROWS_AS(correlate(search.features, tf, search.coords, tmpl_cloud, params, 3),
                  ParameterError);
}

TEST_CASE("correlate keeps rows aligned with their search points") {
  Rng rng(10);
  auto params = make_correlation_params<double>(8, 2, true, 4, 2, rng);
  auto search = make_map(12, 8, rng);
  auto tmpl_cloud = random_cloud(6, rng);
  auto tf = uniform_tensor<double>({6, 8}, -1.0, 1.0, rng);

  auto base = correlate(search.features, tf, search.coords, tmpl_cloud, params, 2);

  std::vector<std::size_t> perm{11, 3, 7, 0, 9, 5, 1, 10, 2, 8, 4, 6};
  FusionMap<double> shuffled;
  for (std::size_t i : perm)
    shuffled.coords.coords.insert(shuffled.coords.coords.end(),
                                  search.coords.coords.begin() + 3 * i,
                                  search.coords.coords.begin() + 3 * i + 3);
  NoGradGuard guard;
  shuffled.features = gather_rows(search.features, perm);
  auto moved = correlate(shuffled.features, tf, shuffled.coords, tmpl_cloud, params, 2);

  // Row i of the permuted run must be row perm[i] of the base run: the fusion
  // map tracks its input point through every stage.
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(moved.features(i, j) == doctest::Approx(base.features(perm[i], j)).epsilon(1e-12));
}

TEST_CASE("gradient check: two correlate iterations end to end") {
  Rng rng(11);
  auto params = make_correlation_params<double>(6, 2, true, 3, 2, rng);
  auto search = make_map(10, 6, rng);
  auto tmpl_cloud = random_cloud(5, rng);
  auto tf = uniform_tensor<double>({5, 6}, -1.0, 1.0, rng);
  ParamList<double> plist;
  collect_params("corr", params, plist);
  auto loss = [&] {
    return sum_all(
        square(correlate(search.features, tf, search.coords, tmpl_cloud, params, 2).features));
  };
  auto report = finite_diff_check<double>(loss, plist, 1e-5, 1e-4);
  INFO("worst ", report.worst);
  CHECK(report.all_passed);
}

TEST_CASE("cosine baseline: convex template mixture on top of the input") {
  Rng rng(12);
  auto search = make_map(9, 6, rng);
  auto tf = uniform_tensor<double>({5, 6}, -1.0, 1.0, rng);
  auto out = cosine_correlation(search.features, tf, search.coords);
  CHECK(out.stage == "cosine");
  REQUIRE(out.features.shape() == Shape{9, 6});
  for (std::size_t j = 0; j < 6; ++j) {
    double lo = 1e18, hi = -1e18;
    for (std::size_t t = 0; t < 5; ++t) {
      lo = std::min(lo, tf(t, j));
      hi = std::max(hi, tf(t, j));
    }
    for (std::size_t i = 0; i < 9; ++i) {
      const double payload = out.features(i, j) - search.features(i, j);
      CHECK(payload >= lo - 1e-12);
      CHECK(payload <= hi + 1e-12);
    }
  }

  // Identical template rows: the mixture equals that row exactly.
  auto same = repeat_rows(Tensor<double>::from({1, 6}, {1, -2, 3, 0.5, -0.5, 2}), 4);
  auto out2 = cosine_correlation(search.features, same, search.coords);
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(out2.features(i, 0) - search.features(i, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(out2.features.requires_grad());
}

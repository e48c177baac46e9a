#include "ptrack/backbone.hpp"

#include <algorithm>
#include <set>

#include "doctest.h"
#include "ptrack/errors.hpp"

using namespace ptrack;

namespace {

BackboneConfig toy_config() {
  BackboneConfig c;
  c.channels = {8, 16, 16};
  c.out_channels = 8;
  c.neighbors = {4, 4, 4};
  c.heads = 2;
  c.use_norm = true;
  return c;
}

PointCloud random_cloud(std::size_t n, Rng& rng, double extent = 3.0) {
  PointCloud pc;
  pc.coords.reserve(3 * n);
  for (std::size_t i = 0; i < 3 * n; ++i) pc.coords.push_back(rng.uniform(-extent, extent));
  return pc;
}

std::set<std::array<double, 3>> coord_set(const PointCloud& pc) {
  std::set<std::array<double, 3>> s;
  for (std::size_t i = 0; i < pc.size(); ++i) s.insert({pc.x(i), pc.y(i), pc.z(i)});
  return s;
}

}  // namespace

TEST_CASE("edge_conv: coincident points with equal features see zero differences") {
  Rng rng(1);
  EdgeConvParams<double> p;
  p.w = xavier_uniform<double>(6, 5, rng);
  p.b = uniform_tensor<double>({1, 5}, -0.2, 0.2, rng);

  PointCloud pc;
  pc.coords = {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1};
  auto features = repeat_rows(Tensor<double>::from({1, 3}, {0.4, -0.7, 0.9}), 4);
  auto graph = knn_coords(pc, 3);
  auto out = edge_conv(coords_tensor<double>(pc), features, graph, p);
  REQUIRE(out.shape() == Shape{4, 5});

  auto one = relu(add_rowvec(
      matmul(Tensor<double>::from({1, 6}, {0.4, -0.7, 0.9, 0, 0, 0}), p.w), p.b));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(out(i, j) == doctest::Approx(one(0, j)).epsilon(1e-14));
}

TEST_CASE("edge_conv is permutation-equivariant") {
  Rng rng(2);
  EdgeConvParams<double> p;
  p.w = xavier_uniform<double>(6, 4, rng);
  p.b = Tensor<double>::zeros({1, 4});
  auto pc = random_cloud(10, rng);
  auto features = uniform_tensor<double>({10, 3}, -1.0, 1.0, rng);
  auto base = edge_conv(coords_tensor<double>(pc), features, knn_coords(pc, 4), p);

  std::vector<std::size_t> perm{9, 4, 1, 7, 0, 3, 8, 2, 6, 5};
  PointCloud ppc;
  for (std::size_t i : perm)
    ppc.coords.insert(ppc.coords.end(), pc.coords.begin() + 3 * i, pc.coords.begin() + 3 * i + 3);
  NoGradGuard guard;
  auto pfeat = gather_rows(features, perm);
  auto pout = edge_conv(coords_tensor<double>(ppc), pfeat, knn_coords(ppc, 4), p);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(pout(i, j) == base(perm[i], j));
}

TEST_CASE("edge_conv gradient check on 8 points, k=4") {
  Rng rng(3);
  auto pc = random_cloud(8, rng);
  auto graph = knn_coords(pc, 4);
  EdgeConvParams<double> p;
  p.w = xavier_uniform<double>(6, 5, rng);
  p.b = Tensor<double>::zeros({1, 5});
  p.b.set_requires_grad(true);
  auto features = uniform_tensor<double>({8, 3}, -1.0, 1.0, rng);
  features.set_requires_grad(true);
  ParamList<double> params{{"w", p.w}, {"b", p.b}, {"features", features}};
  auto loss = [&] {
    return sum_all(square(edge_conv(coords_tensor<double>(pc), features, graph, p)));
  };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  CHECK(report.all_passed);
}

TEST_CASE("edge_conv rejects mismatched graphs") {
  Rng rng(4);
  EdgeConvParams<double> p;
  p.w = xavier_uniform<double>(6, 4, rng);
  p.b = Tensor<double>::zeros({1, 4});
  auto pc = random_cloud(8, rng);
  auto small = random_cloud(6, rng);
  auto features = uniform_tensor<double>({8, 3}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(
      edge_conv(coords_tensor<double>(pc), features, knn_coords(small, 3), p), DimensionError);
}

TEST_CASE("encoder layers follow the halving schedule") {
  Rng rng(5);
  BackboneConfig cfg;  // paper-scale plan, small neighbor sizes are not needed here
  cfg.channels = {8, 12, 16};
  cfg.out_channels = 8;
  cfg.neighbors = {8, 8, 8};
  cfg.heads = 2;
  Rng prng(6);
  auto params = make_backbone_params<double>(cfg, prng);

  auto search = random_cloud(1024, rng);
  auto py = run_branch(search, params, Rng(7));
  REQUIRE(py.clouds.size() == 4);
  CHECK(py.clouds[1].size() == 512);
  CHECK(py.clouds[2].size() == 256);
  CHECK(py.clouds[3].size() == 128);
  CHECK(py.attended[0].shape() == Shape{512, 8});
  CHECK(py.attended[1].shape() == Shape{256, 12});
  CHECK(py.attended[2].shape() == Shape{128, 16});
  CHECK(py.output.shape() == Shape{1024, 8});

  auto tmpl = random_cloud(512, rng);
  auto pt = run_branch(tmpl, params, Rng(7));
  CHECK(pt.clouds[1].size() == 256);
  CHECK(pt.clouds[2].size() == 128);
  CHECK(pt.clouds[3].size() == 64);
}

TEST_CASE("sampled coords at each level are subsets of the parent level") {
  Rng rng(8);
  Rng prng(9);
  auto params = make_backbone_params<double>(toy_config(), prng);
  auto pc = random_cloud(128, rng);
  auto py = run_branch(pc, params, Rng(10));
  for (std::size_t l = 1; l < 4; ++l) {
    auto parent = coord_set(py.clouds[l - 1]);
    for (std::size_t i = 0; i < py.clouds[l].size(); ++i) {
      std::array<double, 3> key{py.clouds[l].x(i), py.clouds[l].y(i), py.clouds[l].z(i)};
      CHECK(parent.count(key) == 1);
    }
  }
}

TEST_CASE("run_branch is deterministic for a fixed seed") {
  Rng rng(11);
  Rng prng(12);
  auto params = make_backbone_params<double>(toy_config(), prng);
  auto pc = random_cloud(64, rng);
  auto a = run_branch(pc, params, Rng(99));
  auto b = run_branch(pc, params, Rng(99));
  REQUIRE(a.output.numel() == b.output.numel());
  for (std::size_t i = 0; i < a.output.numel(); ++i)
    CHECK(a.output.values()[i] == b.output.values()[i]);

  auto c = run_branch(pc, params, Rng(100));
  bool differs = false;
  for (std::size_t i = 0; i < a.output.numel(); ++i)
    differs = differs || a.output.values()[i] != c.output.values()[i];
  CHECK(differs);
}

TEST_CASE("run_branch validates the input size") {
  Rng rng(13);
  Rng prng(14);
  auto params = make_backbone_params<double>(toy_config(), prng);
  auto small = random_cloud(56, rng);
  CHECK_THROWS_AS(run_branch(small, params, Rng(1)), ParameterError);
  auto odd = random_cloud(68, rng);  // >= 64 but not divisible by 8
  CHECK_THROWS_AS(run_branch(odd, params, Rng(1)), ParameterError);
}

TEST_CASE("decoder_layer: single coarse point broadcasts to every query") {
  Rng rng(15);
  DecoderLayerParams<double> dp;
  dp.attn = make_attention_params<double>(6, 2, false, rng);
  dp.pos = make_pos_embed_params<double>(6, rng);
  auto query = uniform_tensor<double>({5, 6}, -1.0, 1.0, rng);
  PointCloud coarse;
  coarse.coords = {0.5, -0.5, 1.0};
  auto coarse_feat = uniform_tensor<double>({1, 6}, -1.0, 1.0, rng);
  auto out = decoder_layer(query, coarse_feat, coarse, dp);
  REQUIRE(out.shape() == Shape{5, 6});
  // residual differs per query, but the attended payload is the same row:
  // out - query must be constant across rows.
  for (std::size_t i = 1; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(out(i, j) - query(i, j) == doctest::Approx(out(0, j) - query(0, j)).epsilon(1e-12));
}

TEST_CASE("decoder_layer permutes with its queries") {
  Rng rng(16);
  DecoderLayerParams<double> dp;
  dp.attn = make_attention_params<double>(6, 2, true, rng);
  dp.pos = make_pos_embed_params<double>(6, rng);
  auto query = uniform_tensor<double>({6, 6}, -1.0, 1.0, rng);
  auto coarse = random_cloud(3, rng);
  auto cfeat = uniform_tensor<double>({3, 6}, -1.0, 1.0, rng);
  auto base = decoder_layer(query, cfeat, coarse, dp);
  std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
  NoGradGuard guard;
  auto pout = decoder_layer(gather_rows(query, perm), cfeat, coarse, dp);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(pout(i, j) == base(perm[i], j));
}

TEST_CASE("gradient check through two stacked decoder layers") {
  Rng rng(17);
  DecoderLayerParams<double> d2;
  d2.attn = make_attention_params<double>(4, 2, true, rng);
  d2.pos = make_pos_embed_params<double>(4, rng);
  d2.kv_w = xavier_uniform<double>(6, 4, rng);
  d2.kv_b = Tensor<double>::zeros({1, 4});
  d2.kv_b.set_requires_grad(true);
  DecoderLayerParams<double> d1;
  d1.attn = make_attention_params<double>(4, 2, true, rng);
  d1.pos = make_pos_embed_params<double>(4, rng);

  auto coarse = random_cloud(3, rng);
  auto mid = random_cloud(5, rng);
  auto deep_feat = uniform_tensor<double>({3, 6}, -1.0, 1.0, rng);
  auto mid_query = uniform_tensor<double>({5, 4}, -1.0, 1.0, rng);
  auto fine_query = uniform_tensor<double>({8, 4}, -1.0, 1.0, rng);

  ParamList<double> params;
  collect_params("d2.attn", d2.attn, params);
  collect_params("d2.pos", d2.pos, params);
  params.emplace_back("d2.kv.w", d2.kv_w);
  params.emplace_back("d2.kv.b", d2.kv_b);
  collect_params("d1.attn", d1.attn, params);
  collect_params("d1.pos", d1.pos, params);

  auto loss = [&] {
    auto fhat_mid = decoder_layer(mid_query, deep_feat, coarse, d2);
    auto fhat_fine = decoder_layer(fine_query, fhat_mid, mid, d1);
    return sum_all(square(fhat_fine));
  };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  CHECK(report.all_passed);
}

TEST_CASE("extract_features: Siamese identity and width plan") {
  Rng rng(18);
  Rng prng(19);
  auto params = make_backbone_params<double>(toy_config(), prng);
  auto cloud = random_cloud(64, rng);
  auto [yt, ys] = extract_features(cloud, cloud, params, 424242);
  REQUIRE(yt.shape() == Shape{64, 8});
  REQUIRE(ys.shape() == Shape{64, 8});
  for (std::size_t i = 0; i < yt.numel(); ++i) CHECK(yt.values()[i] == ys.values()[i]);
}

TEST_CASE("extract_features responds to rigid translation (absolute embeddings)") {
  Rng rng(20);
  Rng prng(21);
  auto params = make_backbone_params<double>(toy_config(), prng);
  auto tmpl = random_cloud(64, rng);
  auto search = random_cloud(128, rng);
  auto [yt0, ys0] = extract_features(tmpl, search, params, 7);

  PointCloud tmpl_moved = tmpl, search_moved = search;
  for (std::size_t i = 0; i < tmpl_moved.size(); ++i) tmpl_moved.coords[3 * i] += 10.0;
  for (std::size_t i = 0; i < search_moved.size(); ++i) search_moved.coords[3 * i] += 10.0;
  auto [yt1, ys1] = extract_features(tmpl_moved, search_moved, params, 7);

  bool differs = false;
  for (std::size_t i = 0; i < ys0.numel(); ++i) differs = differs || ys0.values()[i] != ys1.values()[i];
  CHECK(differs);
}

TEST_CASE("backbone end-to-end gradient check on a 64-point toy cloud") {
  Rng rng(22);
  BackboneConfig cfg;
  cfg.channels = {4, 6, 6};
  cfg.out_channels = 4;
  cfg.neighbors = {4, 4, 4};
  cfg.heads = 2;
  Rng prng(23);
  auto params = make_backbone_params<double>(cfg, prng);
  ParamList<double> plist;
  collect_params("backbone", params, plist);

  auto cloud = random_cloud(64, rng);
  auto loss = [&] {
    auto py = run_branch(cloud, params, Rng(55));
    return sum_all(square(py.output));
  };
  auto report = finite_diff_check<double>(loss, plist, 1e-5, 1e-4);
  INFO("worst rel err ", report.worst);
  CHECK(report.all_passed);
}

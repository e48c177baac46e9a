#include "ptrack/backbone.hpp"

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

template <typename T>
EdgeConvParams<T> make_edge_conv(std::size_t in_ch, std::size_t out_ch, Rng& rng) {
  EdgeConvParams<T> p;
  p.w = xavier_uniform<T>(2 * in_ch, out_ch, rng);
  p.b = Tensor<T>::zeros({1, out_ch});
  p.b.set_requires_grad(true);
  return p;
}

template <typename T>
Tensor<T> linear_rowvec(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

PointCloud gather_cloud(const PointCloud& pc, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.coords.reserve(idx.size() * 3);
  for (std::size_t i : idx)
    out.coords.insert(out.coords.end(), pc.coords.begin() + 3 * i, pc.coords.begin() + 3 * i + 3);
  return out;
}

}  // namespace

template <typename T>
BackboneParams<T> make_backbone_params(const BackboneConfig& config, Rng& rng) {
  BackboneParams<T> p;
  p.config = config;
  std::size_t in_ch = 3;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t out_ch = config.channels[i];
    p.enc[i].edge = make_edge_conv<T>(in_ch, out_ch, rng);
    p.enc[i].attn = make_attention_params<T>(out_ch, config.heads, config.use_norm, rng);
    p.enc[i].pos = make_pos_embed_params<T>(out_ch, rng);
    in_ch = out_ch;
  }
  for (std::size_t l = 0; l < 3; ++l) {
    // Level l queries run at width C_l (out_channels when l == 0); keys come
    // from level l+1 at width C_{l+1}.
    const std::size_t width = l == 0 ? config.out_channels : config.channels[l - 1];
    const std::size_t kv_width = config.channels[l];
    p.dec[l].attn = make_attention_params<T>(width, config.heads, config.use_norm, rng);
    p.dec[l].pos = make_pos_embed_params<T>(width, rng);
    if (kv_width != width) {
      p.dec[l].kv_w = xavier_uniform<T>(kv_width, width, rng);
      p.dec[l].kv_b = Tensor<T>::zeros({1, width});
      p.dec[l].kv_b.set_requires_grad(true);
    }
    if (l == 0) {
      p.dec[l].query_w = xavier_uniform<T>(3, width, rng);
      p.dec[l].query_b = Tensor<T>::zeros({1, width});
      p.dec[l].query_b.set_requires_grad(true);
    }
  }
  return p;
}

template <typename T>
void collect_params(const std::string& prefix, BackboneParams<T>& p, ParamList<T>& out) {
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string enc = prefix + ".enc" + std::to_string(i);
    out.emplace_back(enc + ".edge.w", p.enc[i].edge.w);
    out.emplace_back(enc + ".edge.b", p.enc[i].edge.b);
    collect_params(enc + ".attn", p.enc[i].attn, out);
    collect_params(enc + ".pos", p.enc[i].pos, out);
  }
  for (std::size_t l = 0; l < 3; ++l) {
    const std::string dec = prefix + ".dec" + std::to_string(l);
    collect_params(dec + ".attn", p.dec[l].attn, out);
    collect_params(dec + ".pos", p.dec[l].pos, out);
    if (p.dec[l].kv_w.defined()) {
      out.emplace_back(dec + ".kv.w", p.dec[l].kv_w);
      out.emplace_back(dec + ".kv.b", p.dec[l].kv_b);
    }
    if (p.dec[l].query_w.defined()) {
      out.emplace_back(dec + ".query.w", p.dec[l].query_w);
      out.emplace_back(dec + ".query.b", p.dec[l].query_b);
    }
  }
}

template <typename T>
Tensor<T> edge_conv(const Tensor<T>& coords, const Tensor<T>& in_features,
                    const NeighborGraph& graph, const EdgeConvParams<T>& params) {
  const std::size_t n = in_features.rows();
  if (coords.rows() != n || graph.n != n)
    throw DimensionError("edge_conv: coords/features/graph row counts disagree (" +
                         std::to_string(coords.rows()) + "/" + std::to_string(n) + "/" +
                         std::to_string(graph.n) + ")");
  auto center = repeat_rows(in_features, graph.k);
  auto neighbor = gather_rows(in_features, graph.indices);
  auto edge = concat_cols(center, sub(neighbor, center));
  auto lifted = relu(linear_rowvec(edge, params.w, params.b));
  return group_max_rows(lifted, graph.k);
}

template <typename T>
EncoderLayerOut<T> encoder_layer(const PointCloud& prev_cloud, const Tensor<T>& prev_features,
                                 std::size_t level, const BackboneParams<T>& params, Rng& rng) {
  if (level >= 3) throw ParameterError("encoder_layer: level out of range");
  const std::size_t n = prev_cloud.size();
  if (n % 2 != 0) throw ParameterError("encoder_layer: point count must be even");
  const std::size_t half = n / 2;
  const std::size_t k = params.config.neighbors[level];
  if (half < k)
    throw ParameterError("encoder_layer: " + std::to_string(half) +
                         " points cannot support neighborhood size " + std::to_string(k));

  const auto picked = rng.sample_without_replacement(n, half);
  EncoderLayerOut<T> out;
  out.cloud = gather_cloud(prev_cloud, picked);
  auto sampled_features = gather_rows(prev_features, picked);
  auto graph = knn_coords(out.cloud, k);
  auto coords = coords_tensor<T>(out.cloud);
  out.local = edge_conv(coords, sampled_features, graph, params.enc[level].edge);
  out.pos = pos_embed(coords, params.enc[level].pos);
  out.attended = self_attention(out.local, out.pos, params.enc[level].attn);
  return out;
}

template <typename T>
Tensor<T> decoder_layer(const Tensor<T>& query_features, const Tensor<T>& coarse_features,
                        const PointCloud& coarse_cloud, const DecoderLayerParams<T>& params) {
  if (coarse_features.rows() != coarse_cloud.size())
    throw DimensionError("decoder_layer: coarse features and cloud disagree");
  auto kv = params.kv_w.defined() ? linear_rowvec(coarse_features, params.kv_w, params.kv_b)
                                  : coarse_features;
  auto vpos = pos_embed(coords_tensor<T>(coarse_cloud), params.pos);
  return cross_attention(query_features, kv, vpos, params.attn);
}

template <typename T>
Pyramid<T> run_branch(const PointCloud& pc, const BackboneParams<T>& params, Rng rng) {
  const std::size_t n = pc.size();
  if (n < 64 || n % 8 != 0)
    throw ParameterError("run_branch: point count " + std::to_string(n) +
                         " must be >= 64 and divisible by 8");

  Pyramid<T> py;
  py.clouds.push_back(pc);
  Tensor<T> features = coords_tensor<T>(pc);
  for (std::size_t level = 0; level < 3; ++level) {
    auto out = encoder_layer(py.clouds.back(), features, level, params, rng);
    features = out.attended;
    py.clouds.push_back(std::move(out.cloud));
    py.local.push_back(std::move(out.local));
    py.attended.push_back(std::move(out.attended));
    py.enc_pos.push_back(std::move(out.pos));
  }

  py.interp.assign(4, Tensor<T>());
  py.interp[3] = py.attended[2];
  for (std::size_t l = 3; l-- > 0;) {
    Tensor<T> query;
    if (l == 0) {
      query = linear_rowvec(coords_tensor<T>(py.clouds[0]), params.dec[0].query_w,
                            params.dec[0].query_b);
    } else {
      query = py.attended[l - 1];
    }
    py.interp[l] = decoder_layer(query, py.interp[l + 1], py.clouds[l + 1], params.dec[l]);
  }
  py.output = py.interp[0];
  return py;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> extract_features(const PointCloud& tmpl, const PointCloud& search,
                                                 const BackboneParams<T>& params,
                                                 std::uint64_t seed) {
  // Both branches sample from identically constructed streams, which makes
  // the Siamese property exact: equal clouds give bit-equal feature maps.
  auto yt = run_branch(tmpl, params, Rng(mix_seed(seed)));
  auto ys = run_branch(search, params, Rng(mix_seed(seed)));
  return {yt.output, ys.output};
}

#define PTRACK_INSTANTIATE_BACKBONE(T)                                                          \
  template BackboneParams<T> make_backbone_params(const BackboneConfig&, Rng&);                 \
  template void collect_params(const std::string&, BackboneParams<T>&, ParamList<T>&);          \
  template Tensor<T> edge_conv(const Tensor<T>&, const Tensor<T>&, const NeighborGraph&,        \
                               const EdgeConvParams<T>&);                                       \
  template EncoderLayerOut<T> encoder_layer(const PointCloud&, const Tensor<T>&, std::size_t,   \
                                            const BackboneParams<T>&, Rng&);                    \
  template Tensor<T> decoder_layer(const Tensor<T>&, const Tensor<T>&, const PointCloud&,       \
                                   const DecoderLayerParams<T>&);                               \
  template Pyramid<T> run_branch(const PointCloud&, const BackboneParams<T>&, Rng);             \
  template std::pair<Tensor<T>, Tensor<T>> extract_features(                                    \
      const PointCloud&, const PointCloud&, const BackboneParams<T>&, std::uint64_t);

PTRACK_INSTANTIATE_BACKBONE(float)
PTRACK_INSTANTIATE_BACKBONE(double)

#undef PTRACK_INSTANTIATE_BACKBONE

}  // namespace ptrack

#include "ptrack/correlation.hpp"

#include <cmath>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

// Attention restricted to per-query groups of k consecutive kv rows. Uses the
// same positive kernel as linear_attention; with k rows per query the dense
// group evaluation is the cheaper form.
template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& query, const Tensor<T>& kv, std::size_t k,
                            const AttentionParams<T>& p) {
  const std::size_t n = query.rows();
  if (kv.rows() != n * k)
    throw DimensionError("grouped_attention: kv rows " + std::to_string(kv.rows()) +
                         " != queries * group size " + std::to_string(n * k));
  Tensor<T> heads;
  for (std::size_t h = 0; h < p.heads; ++h) {
    auto qh = elu1(matmul(query, p.w_q[h]));
    auto kh = elu1(matmul(kv, p.w_k[h]));
    auto vh = matmul(kv, p.w_v[h]);
    auto dots = row_sums(mul(kh, repeat_rows(qh, k)));  // [n*k x 1]
    auto numer = group_sum_rows(mul_cols(vh, dots), k);  // [n x d]
    auto denom = group_sum_rows(dots, k);                // [n x 1]
    auto out_h = div_cols(numer, denom);
    heads = h == 0 ? out_h : concat_cols(heads, out_h);
  }
  return matmul(heads, p.w_o);
}

template <typename T>
void check_fusion(const FusionMap<T>& m, const char* who) {
  if (m.features.rank() != 2 || m.features.rows() != m.coords.size())
    throw DimensionError(std::string(who) + ": fusion rows " + shape_str(m.features.shape()) +
                         " not aligned with " + std::to_string(m.coords.size()) + " points");
}

}  // namespace

template <typename T>
CorrelationParams<T> make_correlation_params(std::size_t channels, std::size_t heads,
                                             bool use_norm, std::size_t k,
                                             std::size_t iterations, Rng& rng) {
  if (k == 0) throw ParameterError("correlation: K must be at least 1");
  if (iterations == 0) throw ParameterError("correlation: need at least one iteration");
  CorrelationParams<T> p;
  p.k = k;
  for (std::size_t i = 0; i < iterations; ++i) {
    CorrelationIterParams<T> it;
    it.cross_attn = make_attention_params<T>(channels, heads, use_norm, rng);
    it.cross_pos = make_pos_embed_params<T>(channels, rng);
    it.ego_attn = make_attention_params<T>(channels, heads, use_norm, rng);
    it.ego_pos = make_pos_embed_params<T>(channels, rng);
    p.iters.push_back(std::move(it));
  }
  return p;
}

template <typename T>
void collect_params(const std::string& prefix, CorrelationParams<T>& p, ParamList<T>& out) {
  for (std::size_t i = 0; i < p.iters.size(); ++i) {
    const std::string iter = prefix + ".iter" + std::to_string(i);
    collect_params(iter + ".cross.attn", p.iters[i].cross_attn, out);
    collect_params(iter + ".cross.pos", p.iters[i].cross_pos, out);
    collect_params(iter + ".ego.attn", p.iters[i].ego_attn, out);
    collect_params(iter + ".ego.pos", p.iters[i].ego_pos, out);
  }
}

template <typename T>
FusionMap<T> cross_feature_aug(const FusionMap<T>& search, const Tensor<T>& template_features,
                               const PointCloud& template_coords,
                               const CorrelationIterParams<T>& params) {
  check_fusion(search, "cross_feature_aug");
  if (template_features.rows() == 0) throw ParameterError("cross_feature_aug: empty template");
  if (template_features.rows() != template_coords.size())
    throw DimensionError("cross_feature_aug: template features and coords disagree");

  auto xt = pos_embed(coords_tensor<T>(template_coords), params.cross_pos);
  FusionMap<T> out;
  out.features = cross_attention(search.features, template_features, xt, params.cross_attn);
  out.coords = search.coords;
  out.stage = "coarse";
  out.iteration = search.iteration;
  return out;
}

template <typename T>
FusionMap<T> ego_feature_aug(const FusionMap<T>& fused, const CorrelationIterParams<T>& params,
                             std::size_t k) {
  check_fusion(fused, "ego_feature_aug");
  const std::size_t n = fused.features.rows();
  if (k > n)
    throw ParameterError("ego_feature_aug: K=" + std::to_string(k) + " exceeds " +
                         std::to_string(n) + " search points");

  auto graph = knn_features(fused.features, k);
  auto pos = pos_embed(coords_tensor<T>(fused.coords), params.ego_pos);
  auto kv = add(gather_rows(fused.features, graph.indices), gather_rows(pos, graph.indices));
  auto query = add(fused.features, pos);
  auto attended = grouped_attention(query, kv, k, params.ego_attn);
  auto refined = add(fused.features, attended);
  if (params.ego_attn.use_norm)
    refined = layer_norm(refined, params.ego_attn.gamma, params.ego_attn.beta);

  FusionMap<T> out;
  out.features = refined;
  out.coords = fused.coords;
  out.stage = "refined";
  out.iteration = fused.iteration + 1;
  return out;
}

template <typename T>
FusionMap<T> correlate(const Tensor<T>& search_features, const Tensor<T>& template_features,
                       const PointCloud& search_coords, const PointCloud& template_coords,
                       const CorrelationParams<T>& params, std::size_t iterations, bool use_ego) {
  if (iterations == 0) throw ParameterError("correlate: need at least one iteration");
  if (iterations > params.iters.size())
    throw ParameterError("correlate: " + std::to_string(iterations) +
                         " iterations requested but only " + std::to_string(params.iters.size()) +
                         " parameter sets exist");
  FusionMap<T> fused;
  fused.features = search_features;
  fused.coords = search_coords;
  for (std::size_t i = 0; i < iterations; ++i) {
    fused = cross_feature_aug(fused, template_features, template_coords, params.iters[i]);
    if (use_ego) fused = ego_feature_aug(fused, params.iters[i], params.k);
  }
  return fused;
}

template <typename T>
FusionMap<T> cosine_correlation(const Tensor<T>& search_features,
                                const Tensor<T>& template_features,
                                const PointCloud& search_coords) {
  NoGradGuard guard;
  const std::size_t n = search_features.rows(), m = template_features.rows();
  const std::size_t c = search_features.cols();
  if (m == 0) throw ParameterError("cosine_correlation: empty template");
  if (template_features.cols() != c)
    throw DimensionError("cosine_correlation: feature widths disagree");

  std::vector<T> out(n * c);
  std::vector<double> sims(m);
  for (std::size_t i = 0; i < n; ++i) {
    double norm_s = 0;
    for (std::size_t e = 0; e < c; ++e) {
      const double v = static_cast<double>(search_features(i, e));
      norm_s += v * v;
    }
    norm_s = std::sqrt(norm_s) + 1e-12;
    double peak = -2.0;
    for (std::size_t j = 0; j < m; ++j) {
      double dot = 0, norm_t = 0;
      for (std::size_t e = 0; e < c; ++e) {
        const double tv = static_cast<double>(template_features(j, e));
        dot += static_cast<double>(search_features(i, e)) * tv;
        norm_t += tv * tv;
      }
      sims[j] = dot / (norm_s * (std::sqrt(norm_t) + 1e-12));
      peak = std::max(peak, sims[j]);
    }
    double mass = 0;
    for (auto& s : sims) {
      s = std::exp(s - peak);
      mass += s;
    }
    for (std::size_t e = 0; e < c; ++e) {
      double acc = 0;
      for (std::size_t j = 0; j < m; ++j)
        acc += sims[j] * static_cast<double>(template_features(j, e));
      out[i * c + e] = search_features(i, e) + static_cast<T>(acc / mass);
    }
  }
  FusionMap<T> fm;
  fm.features = Tensor<T>::from({n, c}, std::move(out));
  fm.coords = search_coords;
  fm.stage = "cosine";
  fm.iteration = 1;
  return fm;
}

#define PTRACK_INSTANTIATE_CORRELATION(T)                                                       \
  template CorrelationParams<T> make_correlation_params(std::size_t, std::size_t, bool,         \
                                                        std::size_t, std::size_t, Rng&);        \
  template void collect_params(const std::string&, CorrelationParams<T>&, ParamList<T>&);       \
  template FusionMap<T> cross_feature_aug(const FusionMap<T>&, const Tensor<T>&,                \
                                          const PointCloud&, const CorrelationIterParams<T>&);  \
  template FusionMap<T> ego_feature_aug(const FusionMap<T>&, const CorrelationIterParams<T>&,   \
                                        std::size_t);                                           \
  template FusionMap<T> correlate(const Tensor<T>&, const Tensor<T>&, const PointCloud&,        \
                                  const PointCloud&, const CorrelationParams<T>&, std::size_t,  \
                                  bool);                                                        \
  template FusionMap<T> cosine_correlation(const Tensor<T>&, const Tensor<T>&,                  \
                                           const PointCloud&);

PTRACK_INSTANTIATE_CORRELATION(float)
PTRACK_INSTANTIATE_CORRELATION(double)

#undef PTRACK_INSTANTIATE_CORRELATION

}  // namespace ptrack

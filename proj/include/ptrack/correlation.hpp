#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ptrack/attention.hpp"
#include "ptrack/geometry.hpp"
#include "ptrack/tensor.hpp"

namespace ptrack {

/// Search-area feature map moving through the correlation stages. Rows stay
/// aligned with coords (the search points) at every stage.
template <typename T>
struct FusionMap {
  Tensor<T> features;
  PointCloud coords;
  std::string stage = "input";
  std::size_t iteration = 0;
};

/// One iteration's weights: a template cross-attention block and an
/// ego-graph attention block, each with its own coordinate embedding.
template <typename T>
struct CorrelationIterParams {
  AttentionParams<T> cross_attn;
  PosEmbedParams<T> cross_pos;
  AttentionParams<T> ego_attn;
  PosEmbedParams<T> ego_pos;
};

template <typename T>
struct CorrelationParams {
  std::size_t k = 48;
  std::vector<CorrelationIterParams<T>> iters;
};

template <typename T>
CorrelationParams<T> make_correlation_params(std::size_t channels, std::size_t heads,
                                             bool use_norm, std::size_t k,
                                             std::size_t iterations, Rng& rng);

template <typename T>
void collect_params(const std::string& prefix, CorrelationParams<T>& p, ParamList<T>& out);

/// Embeds the template into the search features: search rows query the
/// template set, whose values carry the template position embedding.
template <typename T>
FusionMap<T> cross_feature_aug(const FusionMap<T>& search, const Tensor<T>& template_features,
                               const PointCloud& template_coords,
                               const CorrelationIterParams<T>& params);

/// Refines the fused map over per-point graphs built in feature space with
/// similarity exp(-|yi - yj|^2): point i queries its K feature-space
/// neighbors, keys and values carrying the neighbors' coordinate embeddings.
template <typename T>
FusionMap<T> ego_feature_aug(const FusionMap<T>& fused, const CorrelationIterParams<T>& params,
                             std::size_t k);

/// Alternates cross_feature_aug and ego_feature_aug, feeding each iteration's
/// output into the next. params must hold weights for at least `iterations`.
/// use_ego=false drops the ego stage (cross-only ablation).
template <typename T>
FusionMap<T> correlate(const Tensor<T>& search_features, const Tensor<T>& template_features,
                       const PointCloud& search_coords, const PointCloud& template_coords,
                       const CorrelationParams<T>& params, std::size_t iterations,
                       bool use_ego = true);

/// Non-learned baseline: each search row absorbs the cosine-softmax-weighted
/// template average. Inference only (no gradient graph), kept for ablation
/// comparisons against the attention-based correlation.
template <typename T>
FusionMap<T> cosine_correlation(const Tensor<T>& search_features,
                                const Tensor<T>& template_features,
                                const PointCloud& search_coords);

}  // namespace ptrack

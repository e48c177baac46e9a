#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "ptrack/attention.hpp"
#include "ptrack/geometry.hpp"
#include "ptrack/rng.hpp"
#include "ptrack/tensor.hpp"

namespace ptrack {

/// Width and neighborhood plan for the three encoder levels plus the decoder
/// output width (level 0). channels[i] is the width after encoder level i+1;
/// the decoder walks back down to out_channels.
struct BackboneConfig {
  std::array<std::size_t, 3> channels{32, 64, 128};
  std::size_t out_channels = 32;
  std::array<std::size_t, 3> neighbors{32, 48, 48};
  std::size_t heads = 2;
  bool use_norm = true;
};

template <typename T>
struct EdgeConvParams {
  Tensor<T> w;  // [2*C_in x C_out]
  Tensor<T> b;  // [1 x C_out]
};

template <typename T>
struct EncoderLayerParams {
  EdgeConvParams<T> edge;
  AttentionParams<T> attn;
  PosEmbedParams<T> pos;
};

template <typename T>
struct DecoderLayerParams {
  AttentionParams<T> attn;   // runs at this level's width
  PosEmbedParams<T> pos;     // embeds the coarse coordinates at this width
  Tensor<T> kv_w, kv_b;      // projects the coarser level's width down; unset when equal
  Tensor<T> query_w, query_b;  // raw-coordinate query projection; level 0 only
};

template <typename T>
struct BackboneParams {
  BackboneConfig config;
  std::array<EncoderLayerParams<T>, 3> enc;
  std::array<DecoderLayerParams<T>, 3> dec;  // index = pyramid level 0..2
};

/// Per-branch intermediate state, indexed by pyramid level. clouds[0] is the
/// input; clouds[l] has N / 2^l points. local/attended/enc_pos hold the three
/// encoder products for levels 1..3 (index l-1). interp[l] is the decoder
/// output at level l, with interp[3] aliased to the deepest attended map.
template <typename T>
struct Pyramid {
  std::vector<PointCloud> clouds;
  std::vector<Tensor<T>> local;
  std::vector<Tensor<T>> attended;
  std::vector<Tensor<T>> enc_pos;
  std::vector<Tensor<T>> interp;
  Tensor<T> output;
};

template <typename T>
BackboneParams<T> make_backbone_params(const BackboneConfig& config, Rng& rng);

template <typename T>
void collect_params(const std::string& prefix, BackboneParams<T>& p, ParamList<T>& out);

/// Edge convolution: per neighbor, a perceptron over concat(center feature,
/// neighbor feature - center feature), max-reduced over the neighborhood.
/// coords participates only in shape validation; for the first level the
/// features are the raw coordinates themselves.
template <typename T>
Tensor<T> edge_conv(const Tensor<T>& coords, const Tensor<T>& in_features,
                    const NeighborGraph& graph, const EdgeConvParams<T>& params);

/// Halves the cloud by random subset selection, aggregates local structure
/// with edge_conv, then applies position-embedded self-attention. Returns the
/// sampled cloud plus (E_l, F_l, X_l).
template <typename T>
struct EncoderLayerOut {
  PointCloud cloud;
  Tensor<T> local;
  Tensor<T> attended;
  Tensor<T> pos;
};

template <typename T>
EncoderLayerOut<T> encoder_layer(const PointCloud& prev_cloud, const Tensor<T>& prev_features,
                                 std::size_t level, const BackboneParams<T>& params, Rng& rng);

/// Adaptive interpolation: fine-level queries cross-attend to the coarser
/// interpolated features, whose values carry the coarse position embedding.
template <typename T>
Tensor<T> decoder_layer(const Tensor<T>& query_features, const Tensor<T>& coarse_features,
                        const PointCloud& coarse_cloud, const DecoderLayerParams<T>& params);

/// Full encoder-decoder over one cloud. Point count must be >= 64 and
/// divisible by 8.
template <typename T>
Pyramid<T> run_branch(const PointCloud& pc, const BackboneParams<T>& params, Rng rng);

/// Shared-weight Siamese pass over template and search clouds. Both branches
/// draw from identically seeded streams, so equal inputs give bit-equal
/// outputs.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> extract_features(const PointCloud& tmpl, const PointCloud& search,
                                                 const BackboneParams<T>& params,
                                                 std::uint64_t seed);

}  // namespace ptrack

#pragma once

#include <cstdint>

#include "ptrack/backbone.hpp"
#include "ptrack/bev_head.hpp"
#include "ptrack/correlation.hpp"

namespace ptrack {

/// Everything the pipeline needs to run, mirroring the configuration file.
struct ModelConfig {
  std::size_t n_template = 512;
  std::size_t n_search = 1024;
  BackboneConfig backbone;
  std::size_t correlation_k = 48;
  std::size_t iterations = 2;
  std::size_t head_channels = 32;
  GridSpec grid;
  double search_margin = 2.0;
  bool use_ego = true;     // ablation switch: cross-only correlation when false
  bool use_cosine = false;  // non-learned correlation baseline
};

template <typename T>
struct Model {
  ModelConfig config;
  BackboneParams<T> backbone;
  CorrelationParams<T> correlation;
  HeadParams<T> head;
};

template <typename T>
Model<T> make_model(const ModelConfig& config, std::uint64_t seed);

/// Stable name -> tensor view of every learnable parameter, prefixed
/// "backbone.", "correlation.iterN.", and "head.". Names are unique.
template <typename T>
ParamList<T> named_parameters(Model<T>& model);

template <typename T>
struct ForwardResult {
  FusionMap<T> fused;
  BEVGrid<T> grid;
  DetectionOutput<T> out;
};

/// Full pipeline pass over already-canonicalized clouds: features, iterative
/// correlation (or the cosine baseline), BEV scatter, detection head.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, const PointCloud& template_cloud,
                         const PointCloud& search_cloud, std::uint64_t seed);

}  // namespace ptrack

#include "ptrack/model.hpp"

#include <string>

#include "ptrack/errors.hpp"

namespace ptrack {

template <typename T>
Model<T> make_model(const ModelConfig& config, std::uint64_t seed) {
  if (config.n_template == 0 || config.n_search == 0)
    throw ParameterError("make_model: cloud sizes must be positive");
  if (config.iterations == 0) throw ParameterError("make_model: need at least one iteration");
  Model<T> model;
  model.config = config;
  Rng rng(mix_seed(seed));
  Rng backbone_rng = rng.fork(1);
  Rng corr_rng = rng.fork(2);
  Rng head_rng = rng.fork(3);
  model.backbone = make_backbone_params<T>(config.backbone, backbone_rng);
  model.correlation =
      make_correlation_params<T>(config.backbone.out_channels, config.backbone.heads,
                                 config.backbone.use_norm, config.correlation_k,
                                 config.iterations, corr_rng);
  model.head = make_head_params<T>(config.backbone.out_channels, config.head_channels, head_rng);
  return model;
}

template <typename T>
ParamList<T> named_parameters(Model<T>& model) {
  ParamList<T> out;
  collect_params("backbone", model.backbone, out);
  collect_params("correlation", model.correlation, out);
  collect_params("head", model.head, out);
  return out;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, const PointCloud& template_cloud,
                         const PointCloud& search_cloud, std::uint64_t seed) {
  if (template_cloud.size() != model.config.n_template)
    throw DimensionError("forward: template has " + std::to_string(template_cloud.size()) +
                         " points, config expects " + std::to_string(model.config.n_template));
  if (search_cloud.size() != model.config.n_search)
    throw DimensionError("forward: search has " + std::to_string(search_cloud.size()) +
                         " points, config expects " + std::to_string(model.config.n_search));
  ForwardResult<T> result;
  auto [template_features, search_features] =
      extract_features<T>(template_cloud, search_cloud, model.backbone, seed);
  if (model.config.use_cosine) {
    result.fused = cosine_correlation<T>(search_features, template_features, search_cloud);
  } else {
    result.fused =
        correlate<T>(search_features, template_features, search_cloud, template_cloud,
                     model.correlation, model.config.iterations, model.config.use_ego);
  }
  result.grid = scatter_to_bev<T>(result.fused, model.config.grid);
  result.out = bev_head<T>(result.grid, model.head);
  return result;
}

#define PTRACK_INSTANTIATE_MODEL(T)                                                       \
  template Model<T> make_model(const ModelConfig&, std::uint64_t);                        \
  template ParamList<T> named_parameters(Model<T>&);                                      \
  template ForwardResult<T> forward(const Model<T>&, const PointCloud&, const PointCloud&, \
                                    std::uint64_t);

PTRACK_INSTANTIATE_MODEL(float)
PTRACK_INSTANTIATE_MODEL(double)

#undef PTRACK_INSTANTIATE_MODEL

}  // namespace ptrack

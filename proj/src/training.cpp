#include "ptrack/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

constexpr double kHeatSigmaCells = 1.0;  // Gaussian target spread
constexpr double kFocalAlpha = 2.0;      // exponent on the probability term
constexpr double kFocalBeta = 4.0;       // exponent on the soft negative weight

constexpr double kPi = 3.14159265358979323846;

/// Adam accumulators, one pair of buffers per parameter tensor.
template <typename T>
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

template <typename T>
void sgd_step(ParamList<T>& params, double lr) {
  for (auto& [name, p] : params) {
    std::vector<T>& val = p.values_mut();
    const std::vector<T>& g = p.grad();
    if (g.size() != val.size()) continue;  // parameter unused by this sample's graph
    for (std::size_t i = 0; i < val.size(); ++i)
      val[i] = static_cast<T>(static_cast<double>(val[i]) - lr * static_cast<double>(g[i]));
  }
}

template <typename T>
void adam_step(ParamList<T>& params, double lr, AdamState<T>& state) {
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.numel(), 0.0);
      state.v[i].assign(params[i].second.numel(), 0.0);
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<T>& val = params[i].second.values_mut();
    const std::vector<T>& g = params[i].second.grad();
    if (g.size() != val.size()) continue;
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      state.m[i][j] = beta1 * state.m[i][j] + (1 - beta1) * gj;
      state.v[i][j] = beta2 * state.v[i][j] + (1 - beta2) * gj * gj;
      const double mhat = state.m[i][j] / bc1;
      const double vhat = state.v[i][j] / bc2;
      val[j] = static_cast<T>(static_cast<double>(val[j]) -
                              lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

}  // namespace

template <typename T>
LossResult<T> compute_loss(const DetectionOutput<T>& out, const Box7& gt_box,
                           const GridSpec& spec, const LossWeights& weights) {
  const std::size_t h = spec.rows(), w = spec.cols();
  if (out.heatmap.shape() != Shape{1, h, w})
    throw DimensionError("compute_loss: heatmap shape " + shape_str(out.heatmap.shape()) +
                         " does not match the grid " + std::to_string(h) + "x" +
                         std::to_string(w));
  const std::ptrdiff_t cell = spec.cell_of(gt_box.x, gt_box.y);
  if (cell < 0)
    throw EvalError("compute_loss: gt center (" + std::to_string(gt_box.x) + ", " +
                    std::to_string(gt_box.y) + ") lies outside the grid");
  const std::size_t r0 = static_cast<std::size_t>(cell) / w;
  const std::size_t c0 = static_cast<std::size_t>(cell) % w;

  // Gaussian target and its focal weights, all constants w.r.t. the graph.
  std::vector<T> pos_mask(h * w, T(0)), neg_weight(h * w, T(0));
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double dr = static_cast<double>(r) - static_cast<double>(r0);
      const double dc = static_cast<double>(c) - static_cast<double>(c0);
      const double y = std::exp(-(dr * dr + dc * dc) / (2 * kHeatSigmaCells * kHeatSigmaCells));
      if (r == r0 && c == c0)
        pos_mask[r * w + c] = T(1);
      else
        neg_weight[r * w + c] = static_cast<T>(std::pow(1.0 - y, kFocalBeta));
    }
  }
  Tensor<T> mask_pos = Tensor<T>::from({1, h, w}, std::move(pos_mask));
  Tensor<T> w_neg = Tensor<T>::from({1, h, w}, std::move(neg_weight));
  Tensor<T> ones = Tensor<T>::full({1, h, w}, T(1));

  // Stable focal BCE: log p = -softplus(-x), log(1-p) = -softplus(x).
  const Tensor<T>& x = out.heatmap;
  Tensor<T> p = sigmoid(x);
  Tensor<T> logp = mul_scalar(softplus(mul_scalar(x, T(-1))), T(-1));
  Tensor<T> log1mp = mul_scalar(softplus(x), T(-1));
  Tensor<T> pos_term = mul(mask_pos, mul(square(sub(ones, p)), logp));
  Tensor<T> neg_term = mul(w_neg, mul(square(p), log1mp));
  static_assert(kFocalAlpha == 2.0, "focal exponent is baked in via square()");
  Tensor<T> loss_heat = mul_scalar(add(sum_all(pos_term), sum_all(neg_term)), T(-1));

  // L1 regressions at the positive cell only.
  auto masked_l1 = [&](const Tensor<T>& pred, const std::vector<double>& gt_vals,
                       std::size_t channels) {
    if (pred.shape() != Shape{channels, h, w})
      throw DimensionError("compute_loss: regression map shape " + shape_str(pred.shape()));
    std::vector<T> mask(channels * h * w, T(0)), target(channels * h * w, T(0));
    for (std::size_t ch = 0; ch < channels; ++ch) {
      mask[ch * h * w + r0 * w + c0] = T(1);
      target[ch * h * w + r0 * w + c0] = static_cast<T>(gt_vals[ch]);
    }
    Tensor<T> m = Tensor<T>::from({channels, h, w}, std::move(mask));
    Tensor<T> tgt = Tensor<T>::from({channels, h, w}, std::move(target));
    return sum_all(vabs(mul(m, sub(pred, tgt))));
  };

  const double off_x = gt_box.x - spec.cell_center_x(c0);
  const double off_y = gt_box.y - spec.cell_center_y(r0);
  Tensor<T> loss_off = masked_l1(out.offset, {off_x, off_y}, 2);
  Tensor<T> loss_z = masked_l1(out.zmap, {gt_box.z}, 1);
  Tensor<T> loss_yaw = masked_l1(out.yawmap, {std::cos(gt_box.yaw), std::sin(gt_box.yaw)}, 2);

  Tensor<T> total = add(add(mul_scalar(loss_heat, static_cast<T>(weights.heatmap)),
                            mul_scalar(loss_off, static_cast<T>(weights.offset))),
                        add(mul_scalar(loss_z, static_cast<T>(weights.z)),
                            mul_scalar(loss_yaw, static_cast<T>(weights.yaw))));

  LossResult<T> result;
  result.total = total;
  result.report.heatmap = static_cast<double>(loss_heat.item());
  result.report.offset = static_cast<double>(loss_off.item());
  result.report.z = static_cast<double>(loss_z.item());
  result.report.yaw = static_cast<double>(loss_yaw.item());
  result.report.total = static_cast<double>(total.item());
  return result;
}

std::vector<TrainSample> make_training_samples(const std::vector<Tracklet>& tracklets,
                                               const SampleOptions& options, Rng& rng) {
  if (options.n_template == 0 || options.n_search == 0)
    throw ParameterError("make_training_samples: cloud sizes must be positive");
  std::vector<TrainSample> samples;
  const double jyaw = options.jitter_yaw_deg * kPi / 180.0;
  for (const Tracklet& tracklet : tracklets) {
    for (std::size_t f = 1; f < tracklet.frames.size(); ++f) {
      if (!tracklet.frames[f].gt || !tracklet.frames[f - 1].gt) continue;
      const Box7& prev_gt = *tracklet.frames[f - 1].gt;
      const Box7& cur_gt = *tracklet.frames[f].gt;

      Box7 jbox = cur_gt;
      jbox.x += rng.uniform(-options.jitter_pos, options.jitter_pos);
      jbox.y += rng.uniform(-options.jitter_pos, options.jitter_pos);
      jbox.z += rng.uniform(-options.jitter_pos, options.jitter_pos);
      jbox.yaw = normalize_angle(jbox.yaw + rng.uniform(-jyaw, jyaw));

      PointCloud tmpl_crop = select_points(tracklet.frames[f - 1].cloud,
                                           points_in_box(tracklet.frames[f - 1].cloud, prev_gt));
      if (tmpl_crop.size() == 0) continue;
      PointCloud search_crop =
          crop_search_area(tracklet.frames[f].cloud, jbox, options.margin);
      if (search_crop.size() == 0) continue;

      TrainSample sample;
      sample.template_cloud =
          random_resample(to_box_frame(tmpl_crop, prev_gt), options.n_template, rng);
      sample.search_cloud =
          random_resample(to_box_frame(search_crop, jbox), options.n_search, rng);
      sample.gt_box = box_to_frame(cur_gt, jbox);
      samples.push_back(std::move(sample));
    }
  }
  return samples;
}

template <typename T>
TrainReport train(Model<T>& model, const std::vector<TrainSample>& samples,
                  const TrainOptions& options) {
  if (samples.empty()) throw ParameterError("train: no samples");
  TrainReport report;
  report.losses.reserve(options.steps);
  ParamList<T> params = named_parameters(model);
  for (auto& [name, p] : params) p.set_requires_grad(true);
  AdamState<T> adam;
  Rng rng(options.seed);
  for (std::size_t step = 0; step < options.steps; ++step) {
    const TrainSample& sample = samples[rng.uniform_index(samples.size())];
    const std::uint64_t forward_seed = rng.fork(step).seed();
    LossResult<T> loss;
    try {
      ForwardResult<T> fwd =
          forward(model, sample.template_cloud, sample.search_cloud, forward_seed);
      loss = compute_loss(fwd.out, sample.gt_box, model.config.grid, options.weights);
    } catch (const EvalError&) {
      ++report.skipped;
      report.losses.push_back(report.losses.empty() ? 0.0 : report.losses.back());
      continue;
    }
    if (!std::isfinite(loss.report.total))
      throw EvalError("train: non-finite loss at step " + std::to_string(step) +
                      " (heatmap " + std::to_string(loss.report.heatmap) + ", offset " +
                      std::to_string(loss.report.offset) + ", z " +
                      std::to_string(loss.report.z) + ", yaw " +
                      std::to_string(loss.report.yaw) + ")");
    zero_grads(params);
    loss.total.backward();
    if (options.rule == StepRule::fixed)
      sgd_step(params, options.lr);
    else
      adam_step(params, options.lr, adam);
    report.losses.push_back(loss.report.total);
  }
  return report;
}

void write_loss_curve(const std::string& path, const std::vector<double>& losses) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_loss_curve: cannot open " + path);
  out << std::setprecision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << " " << losses[i] << "\n";
  if (!out) throw DataError("write_loss_curve: short write to " + path);
}

#define PTRACK_INSTANTIATE_TRAINING(T)                                                     \
  template LossResult<T> compute_loss(const DetectionOutput<T>&, const Box7&,              \
                                      const GridSpec&, const LossWeights&);                \
  template TrainReport train(Model<T>&, const std::vector<TrainSample>&, const TrainOptions&);

PTRACK_INSTANTIATE_TRAINING(float)
PTRACK_INSTANTIATE_TRAINING(double)

#undef PTRACK_INSTANTIATE_TRAINING

}  // namespace ptrack

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ptrack/bev_head.hpp"
#include "ptrack/dataset.hpp"
#include "ptrack/model.hpp"

namespace ptrack {

struct LossWeights {
  double heatmap = 1.0;
  double offset = 1.0;
  double z = 1.0;
  double yaw = 1.0;
};

struct LossReport {
  double total = 0;
  double heatmap = 0;
  double offset = 0;
  double z = 0;
  double yaw = 0;
};

/// Scalar loss tensor (for backward) plus its term breakdown. report.total
/// equals the weighted term sum within 1e-12.
template <typename T>
struct LossResult {
  Tensor<T> total;
  LossReport report;
};

/// Focal binary cross-entropy against a Gaussian heatmap target (sigma = 1
/// cell) plus L1 regression terms read at the GT cell. gt_box lives in the
/// canonical search frame. Throws EvalError when the GT center lies outside
/// the grid (callers count such samples as skipped).
template <typename T>
LossResult<T> compute_loss(const DetectionOutput<T>& out, const Box7& gt_box,
                           const GridSpec& spec, const LossWeights& weights);

/// One supervised pair: clouds already canonicalized to the jittered-box
/// frame and resampled to the model's sizes; gt_box in that same frame.
struct TrainSample {
  PointCloud template_cloud;
  PointCloud search_cloud;
  Box7 gt_box;
};

struct SampleOptions {
  std::size_t n_template = 512;
  std::size_t n_search = 1024;
  double margin = 2.0;
  double jitter_pos = 0.3;      // uniform meters on each translation axis
  double jitter_yaw_deg = 5.0;  // uniform degrees
};

/// Builds (template, search, gt) pairs from consecutive GT frames: the
/// search region is the current GT box jittered to simulate previous-frame
/// error, the template is the previous frame's GT crop. Pairs whose crops
/// come up empty are dropped.
std::vector<TrainSample> make_training_samples(const std::vector<Tracklet>& tracklets,
                                               const SampleOptions& options, Rng& rng);

enum class StepRule { fixed, adam };

struct TrainOptions {
  std::size_t steps = 200;
  double lr = 1e-3;
  StepRule rule = StepRule::adam;
  LossWeights weights;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> losses;  // one entry per step
  std::size_t skipped = 0;     // samples whose GT fell outside the grid
};

/// Sequential mini-batch (batch size 1) gradient descent, deterministic for
/// a fixed seed. Aborts with EvalError and diagnostics on a non-finite loss.
template <typename T>
TrainReport train(Model<T>& model, const std::vector<TrainSample>& samples,
                  const TrainOptions& options);

/// Two-column text (step index, loss value), one row per step.
void write_loss_curve(const std::string& path, const std::vector<double>& losses);

}  // namespace ptrack

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ptrack/dataset.hpp"
#include "ptrack/model.hpp"

namespace ptrack {

/// Success-plot AUC: the fraction of frames with IoU > tau, integrated over
/// tau in [0, 1], times 100. Each frame contributes measure iou_i, so the
/// integral collapses exactly to mean(iou) * 100; computed that way.
double success_metric(const std::vector<double>& ious);

/// Precision-plot AUC: the fraction of frames with center distance < tau,
/// tau in [0, 2] m, normalized by 2 m, times 100. Closed form:
/// mean((2 - min(d, 2)) / 2) * 100.
double precision_metric(const std::vector<double>& dists);

struct EvalReport {
  std::string category;
  std::size_t frames = 0;
  double success = 0;
  double precision = 0;
  std::vector<double> ious;   // per evaluated frame, tracklet order
  std::vector<double> dists;  // 3D center distance, meters
  std::size_t degraded = 0;
};

/// Per-tracklet box producer: one box per frame, frame 0 echoing the GT.
using TrackletPredictor = std::function<std::vector<Box7>(const Tracklet&)>;

/// One-pass evaluation: every tracklet initialized once from its frame-0 GT,
/// never re-initialized; all frames with GT across all tracklets pool into
/// one Success and one Precision figure.
EvalReport one_pass_eval(const std::vector<Tracklet>& tracklets,
                         const TrackletPredictor& predictor, const std::string& category = "");

/// Tracker-backed overload. Failed tracklets contribute their held boxes
/// (never dropped frames).
template <typename T>
EvalReport one_pass_eval(const std::vector<Tracklet>& tracklets, const Model<T>& model,
                         std::uint64_t seed, const std::string& category = "");

/// Structured text: header lines (category, frames, success, precision)
/// plus an optional per-frame table.
std::string serialize_eval_report(const EvalReport& report, bool per_frame_table = false);

}  // namespace ptrack

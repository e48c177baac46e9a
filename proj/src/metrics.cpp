#include "ptrack/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "ptrack/errors.hpp"
#include "ptrack/tracker.hpp"

namespace ptrack {

double success_metric(const std::vector<double>& ious) {
  if (ious.empty()) throw EvalError("success_metric: no frames");
  double sum = 0;
  for (double v : ious) {
    if (!std::isfinite(v) || v < 0 || v > 1)
      throw ParameterError("success_metric: IoU " + std::to_string(v) + " outside [0, 1]");
    sum += v;
  }
  return sum / static_cast<double>(ious.size()) * 100.0;
}

double precision_metric(const std::vector<double>& dists) {
  if (dists.empty()) throw EvalError("precision_metric: no frames");
  double sum = 0;
  for (double d : dists) {
    if (!std::isfinite(d) || d < 0)
      throw ParameterError("precision_metric: distance " + std::to_string(d) + " is negative");
    sum += (2.0 - std::min(d, 2.0)) / 2.0;
  }
  return sum / static_cast<double>(dists.size()) * 100.0;
}

EvalReport one_pass_eval(const std::vector<Tracklet>& tracklets,
                         const TrackletPredictor& predictor, const std::string& category) {
  if (tracklets.empty()) throw EvalError("one_pass_eval: no tracklets");
  EvalReport report;
  report.category = category;
  for (const Tracklet& tracklet : tracklets) {
    if (tracklet.frames.empty() || !tracklet.frames[0].gt)
      throw DataError("one_pass_eval: tracklet " + tracklet.id + " has no frame-0 GT box");
    std::vector<Box7> boxes = predictor(tracklet);
    if (boxes.size() != tracklet.frames.size())
      throw DimensionError("one_pass_eval: predictor returned " + std::to_string(boxes.size()) +
                           " boxes for " + std::to_string(tracklet.frames.size()) + " frames");
    for (std::size_t f = 0; f < boxes.size(); ++f) {
      if (!tracklet.frames[f].gt) continue;
      const Box7& gt = *tracklet.frames[f].gt;
      const Box7& pred = boxes[f];
      report.ious.push_back(iou3d(pred, gt));
      const double dx = pred.x - gt.x, dy = pred.y - gt.y, dz = pred.z - gt.z;
      report.dists.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
  }
  report.frames = report.ious.size();
  report.success = success_metric(report.ious);
  report.precision = precision_metric(report.dists);
  return report;
}

template <typename T>
EvalReport one_pass_eval(const std::vector<Tracklet>& tracklets, const Model<T>& model,
                         std::uint64_t seed, const std::string& category) {
  std::size_t degraded = 0;
  TrackletPredictor predictor = [&](const Tracklet& tracklet) {
    std::vector<FrameRecord> records = track_tracklet(model, tracklet, seed);
    std::vector<Box7> boxes;
    boxes.reserve(records.size());
    for (const FrameRecord& rec : records) {
      boxes.push_back(rec.pred);
      if (rec.degraded) ++degraded;
    }
    return boxes;
  };
  EvalReport report = one_pass_eval(tracklets, predictor, category);
  report.degraded = degraded;
  return report;
}

std::string serialize_eval_report(const EvalReport& report, bool per_frame_table) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "category " << (report.category.empty() ? "all" : report.category) << "\n";
  os << "frames " << report.frames << "\n";
  os << "success " << report.success << "\n";
  os << "precision " << report.precision << "\n";
  os << "degraded " << report.degraded << "\n";
  if (per_frame_table) {
    os << "frame iou dist\n";
    for (std::size_t i = 0; i < report.ious.size(); ++i)
      os << i << " " << report.ious[i] << " " << report.dists[i] << "\n";
  }
  return os.str();
}

template EvalReport one_pass_eval(const std::vector<Tracklet>&, const Model<float>&,
                                  std::uint64_t, const std::string&);
template EvalReport one_pass_eval(const std::vector<Tracklet>&, const Model<double>&,
                                  std::uint64_t, const std::string&);

}  // namespace ptrack

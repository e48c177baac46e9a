#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ptrack/dataset.hpp"
#include "ptrack/model.hpp"

namespace ptrack {

/// Wall-clock milliseconds per pipeline stage.
struct StageTimes {
  double crop = 0;
  double backbone = 0;
  double correlation = 0;
  double head = 0;
  double total = 0;
};

StageTimes operator+(const StageTimes& a, const StageTimes& b);

template <typename T>
struct TrackerState {
  const Model<T>* model = nullptr;
  Box7 first_box;
  Box7 prev_box;  // size always equals first_box size
  PointCloud first_template;   // frame-0 GT crop, box-local
  PointCloud template_points;  // current merged template, box-local
  std::uint64_t seed = 0;
  std::size_t frame_index = 0;  // frames stepped so far
  std::size_t degraded_frames = 0;
  StageTimes accum;
};

/// Primes the state from the frame-0 GT box: template = in-box points
/// canonicalized into the box frame. Throws DataError when the crop is empty.
template <typename T>
TrackerState<T> init(const PointCloud& frame0, const Box7& gt_box, const Model<T>& model,
                     std::uint64_t seed);

template <typename T>
struct StepResult {
  Box7 box;
  bool degraded = false;
  StageTimes times;
};

/// One tracking iteration: crop around prev_box, canonicalize, resample to
/// the model's sizes, run the pipeline, decode, then refresh the template.
/// Empty crops or decode failures keep prev_box and set the degraded flag.
template <typename T>
StepResult<T> step(TrackerState<T>& state, const PointCloud& frame);

/// Template refresh rule: union of the frame-0 GT crop and the current
/// predicted-box crop, each in its own box-local frame. An empty current
/// crop falls back to the first-frame crop alone.
template <typename T>
void update_template(TrackerState<T>& state, const PointCloud& frame, const Box7& predicted_box);

/// Per-frame tracking record. Stage times stay in memory only; result files
/// carry just the boxes and flags so reruns are bit-identical.
struct FrameRecord {
  std::size_t frame = 0;
  Box7 pred;
  std::optional<Box7> gt;
  bool degraded = false;
  StageTimes times;
};

/// Runs a full tracklet: record 0 is the GT initialization, later records
/// come from step(). Tracklets whose frame-0 box holds no points degrade to
/// the initial box for every frame rather than failing.
template <typename T>
std::vector<FrameRecord> track_tracklet(const Model<T>& model, const Tracklet& tracklet,
                                        std::uint64_t seed);

/// Line-delimited text, one record per line, full double precision.
void write_results(const std::string& path, const std::vector<FrameRecord>& records);
std::vector<FrameRecord> read_results(const std::string& path);

}  // namespace ptrack

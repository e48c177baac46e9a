#include "ptrack/tracker.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void put_box(std::ostringstream& os, const Box7& b) {
  os << fmt17(b.x) << " " << fmt17(b.y) << " " << fmt17(b.z) << " " << fmt17(b.w) << " "
     << fmt17(b.l) << " " << fmt17(b.h) << " " << fmt17(b.yaw);
}

Box7 get_box(std::istringstream& in, const std::string& path, std::size_t line_no) {
  Box7 b;
  if (!(in >> b.x >> b.y >> b.z >> b.w >> b.l >> b.h >> b.yaw))
    throw DataError("read_results: " + path + " line " + std::to_string(line_no) +
                    ": malformed box");
  return b;
}

}  // namespace

StageTimes operator+(const StageTimes& a, const StageTimes& b) {
  return {a.crop + b.crop, a.backbone + b.backbone, a.correlation + b.correlation,
          a.head + b.head, a.total + b.total};
}

template <typename T>
TrackerState<T> init(const PointCloud& frame0, const Box7& gt_box, const Model<T>& model,
                     std::uint64_t seed) {
  check_box(gt_box);
  PointCloud crop = select_points(frame0, points_in_box(frame0, gt_box));
  if (crop.size() == 0)
    throw DataError("tracker init: the frame-0 box contains no points");
  TrackerState<T> state;
  state.model = &model;
  state.first_box = gt_box;
  state.prev_box = gt_box;
  state.first_template = to_box_frame(crop, gt_box);
  state.template_points = state.first_template;
  state.seed = seed;
  return state;
}

template <typename T>
void update_template(TrackerState<T>& state, const PointCloud& frame, const Box7& predicted_box) {
  PointCloud crop = select_points(frame, points_in_box(frame, predicted_box));
  if (crop.size() == 0) {
    state.template_points = state.first_template;
    return;
  }
  state.template_points = merge_clouds(state.first_template, to_box_frame(crop, predicted_box));
}

template <typename T>
StepResult<T> step(TrackerState<T>& state, const PointCloud& frame) {
  if (state.model == nullptr) throw ParameterError("tracker step: state is not initialized");
  const Model<T>& model = *state.model;
  const ModelConfig& config = model.config;
  NoGradGuard no_grad;
  StepResult<T> result;
  const auto t_total = Clock::now();

  auto t0 = Clock::now();
  PointCloud crop = crop_search_area(frame, state.prev_box, config.search_margin);
  result.times.crop = ms_since(t0);

  std::optional<Box7> decoded;
  if (crop.size() > 0) {
    Rng frame_rng = Rng(state.seed).fork(state.frame_index + 1);
    PointCloud local_search = to_box_frame(crop, state.prev_box);
    PointCloud search = random_resample(local_search, config.n_search, frame_rng);
    PointCloud tmpl = random_resample(state.template_points, config.n_template, frame_rng);
    const std::uint64_t forward_seed = frame_rng.raw();

    t0 = Clock::now();
    auto [template_features, search_features] =
        extract_features<T>(tmpl, search, model.backbone, forward_seed);
    result.times.backbone = ms_since(t0);

    t0 = Clock::now();
    FusionMap<T> fused;
    if (config.use_cosine) {
      fused = cosine_correlation<T>(search_features, template_features, search);
    } else {
      fused = correlate<T>(search_features, template_features, search, tmpl, model.correlation,
                           config.iterations, config.use_ego);
    }
    result.times.correlation = ms_since(t0);

    t0 = Clock::now();
    BEVGrid<T> grid = scatter_to_bev<T>(fused, config.grid);
    DetectionOutput<T> out = bev_head<T>(grid, model.head);
    decoded = decode_box<T>(out, grid, state.prev_box);
    result.times.head = ms_since(t0);
  }

  if (decoded) {
    result.box = *decoded;
  } else {
    result.box = state.prev_box;
    result.degraded = true;
    ++state.degraded_frames;
  }
  state.prev_box = result.box;
  update_template(state, frame, result.box);
  ++state.frame_index;
  result.times.total = ms_since(t_total);
  state.accum = state.accum + result.times;
  return result;
}

template <typename T>
std::vector<FrameRecord> track_tracklet(const Model<T>& model, const Tracklet& tracklet,
                                        std::uint64_t seed) {
  if (tracklet.frames.empty()) throw DataError("track_tracklet: tracklet has no frames");
  if (!tracklet.frames[0].gt) throw DataError("track_tracklet: frame 0 has no GT box");
  std::vector<FrameRecord> records;
  records.reserve(tracklet.frames.size());

  FrameRecord first;
  first.frame = 0;
  first.pred = *tracklet.frames[0].gt;
  first.gt = tracklet.frames[0].gt;
  records.push_back(first);

  std::optional<TrackerState<T>> state;
  try {
    state = init(tracklet.frames[0].cloud, *tracklet.frames[0].gt, model, seed);
  } catch (const DataError&) {
    // unusable initialization: hold the first box for the whole tracklet
  }
  for (std::size_t f = 1; f < tracklet.frames.size(); ++f) {
    FrameRecord rec;
    rec.frame = f;
    rec.gt = tracklet.frames[f].gt;
    if (state) {
      StepResult<T> s = step(*state, tracklet.frames[f].cloud);
      rec.pred = s.box;
      rec.degraded = s.degraded;
      rec.times = s.times;
    } else {
      rec.pred = *tracklet.frames[0].gt;
      rec.degraded = true;
    }
    records.push_back(rec);
  }
  return records;
}

void write_results(const std::string& path, const std::vector<FrameRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_results: cannot open " + path);
  for (const FrameRecord& rec : records) {
    std::ostringstream os;
    os << "frame " << rec.frame << " pred ";
    put_box(os, rec.pred);
    os << " gt ";
    if (rec.gt) {
      put_box(os, *rec.gt);
    } else {
      os << "none";
    }
    os << " degraded " << (rec.degraded ? 1 : 0);
    out << os.str() << "\n";
  }
  if (!out) throw DataError("write_results: short write to " + path);
}

std::vector<FrameRecord> read_results(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_results: cannot open " + path);
  std::vector<FrameRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    FrameRecord rec;
    auto expect = [&](const char* want) {
      if (!(ls >> tag) || tag != want)
        throw DataError("read_results: " + path + " line " + std::to_string(line_no) +
                        ": expected '" + want + "'");
    };
    expect("frame");
    if (!(ls >> rec.frame))
      throw DataError("read_results: " + path + " line " + std::to_string(line_no) +
                      ": malformed frame index");
    expect("pred");
    rec.pred = get_box(ls, path, line_no);
    expect("gt");
    std::istringstream::pos_type mark = ls.tellg();
    std::string gt_tok;
    ls >> gt_tok;
    if (gt_tok != "none") {
      ls.seekg(mark);
      rec.gt = get_box(ls, path, line_no);
    }
    expect("degraded");
    int flag = 0;
    if (!(ls >> flag) || (flag != 0 && flag != 1))
      throw DataError("read_results: " + path + " line " + std::to_string(line_no) +
                      ": malformed degraded flag");
    rec.degraded = flag == 1;
    records.push_back(rec);
  }
  return records;
}

#define PTRACK_INSTANTIATE_TRACKER(T)                                                        \
  template TrackerState<T> init(const PointCloud&, const Box7&, const Model<T>&,             \
                                std::uint64_t);                                              \
  template void update_template(TrackerState<T>&, const PointCloud&, const Box7&);           \
  template StepResult<T> step(TrackerState<T>&, const PointCloud&);                          \
  template std::vector<FrameRecord> track_tracklet(const Model<T>&, const Tracklet&,         \
                                                   std::uint64_t);

PTRACK_INSTANTIATE_TRACKER(float)
PTRACK_INSTANTIATE_TRACKER(double)

#undef PTRACK_INSTANTIATE_TRACKER

}  // namespace ptrack

#include "ptrack/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ptrack/errors.hpp"
#include "ptrack/rng.hpp"

namespace fs = std::filesystem;

namespace ptrack {

namespace {

float read_f32le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(v);
}

void write_f32le(std::string& buf, float f) {
  std::uint32_t v = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::string fmt17(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

constexpr double kClutterHalfXY = 10.0;  // 20 x 20 x 4 m clutter region
constexpr double kClutterHalfZ = 2.0;
constexpr double kSurfaceInset = 1e-6;  // keeps surface samples strictly inside

void validate_spec(const SynthSpec& spec) {
  if (spec.width <= 0 || spec.length <= 0 || spec.height <= 0)
    throw ParameterError("generate_synthetic: object dimensions must be positive");
  if (spec.surface_density < 0 || spec.clutter_density < 0)
    throw ParameterError("generate_synthetic: densities must be >= 0");
  if (spec.waypoints.size() < 2)
    throw ParameterError("generate_synthetic: need at least 2 waypoints");
  if (spec.dropout < 0 || spec.dropout >= 1)
    throw ParameterError("generate_synthetic: dropout must be in [0, 1)");
}

/// Uniform sample on the box surface (box-local frame), inset so the point is
/// strictly interior to the box volume test.
void sample_surface_point(const SynthSpec& spec, Rng& rng, double& x, double& y, double& z) {
  const double hw = spec.width / 2, hl = spec.length / 2, hh = spec.height / 2;
  const double ax = spec.length * spec.height;  // each x-normal face
  const double ay = spec.width * spec.height;
  const double az = spec.width * spec.length;
  const double total = 2 * (ax + ay + az);
  double r = rng.uniform() * total;
  double u = rng.uniform(), v = rng.uniform();
  if (r < 2 * ax) {
    x = (r < ax ? hw : -hw) + (r < ax ? -kSurfaceInset : kSurfaceInset);
    y = (2 * u - 1) * hl;
    z = (2 * v - 1) * hh;
  } else if (r < 2 * ax + 2 * ay) {
    r -= 2 * ax;
    x = (2 * u - 1) * hw;
    y = (r < ay ? hl : -hl) + (r < ay ? -kSurfaceInset : kSurfaceInset);
    z = (2 * v - 1) * hh;
  } else {
    r -= 2 * ax + 2 * ay;
    x = (2 * u - 1) * hw;
    y = (2 * v - 1) * hl;
    z = (r < az ? hh : -hh) + (r < az ? -kSurfaceInset : kSurfaceInset);
  }
}

}  // namespace

PointCloud read_kitti_velodyne(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_kitti_velodyne: cannot open " + path);
  std::string data(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
  if (data.size() % 16 != 0)
    throw DataError("read_kitti_velodyne: " + path + ": truncated record at byte " +
                    std::to_string(data.size() - data.size() % 16) + " (file length " +
                    std::to_string(data.size()) + " is not a multiple of 16)");
  const std::size_t n = data.size() / 16;
  PointCloud pc;
  pc.feat_width = 1;
  pc.coords.reserve(n * 3);
  pc.features.reserve(n);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(data.data());
  for (std::size_t i = 0; i < n; ++i, p += 16) {
    pc.coords.push_back(read_f32le(p));
    pc.coords.push_back(read_f32le(p + 4));
    pc.coords.push_back(read_f32le(p + 8));
    pc.features.push_back(read_f32le(p + 12));
  }
  return pc;
}

void write_kitti_velodyne(const std::string& path, const PointCloud& pc) {
  std::string buf;
  buf.reserve(pc.size() * 16);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    write_f32le(buf, static_cast<float>(pc.x(i)));
    write_f32le(buf, static_cast<float>(pc.y(i)));
    write_f32le(buf, static_cast<float>(pc.z(i)));
    double intensity = pc.has_features() ? pc.features[i * pc.feat_width] : 0.0;
    write_f32le(buf, static_cast<float>(intensity));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("write_kitti_velodyne: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write_kitti_velodyne: short write to " + path);
}

void save_tracklet(const std::string& dir, const Tracklet& tracklet) {
  if (tracklet.frames.empty()) throw ParameterError("save_tracklet: tracklet has no frames");
  if (!tracklet.frames[0].gt) throw DataError("save_tracklet: frame 0 must carry a GT box");
  fs::create_directories(fs::path(dir) / "velodyne");
  std::ostringstream labels;
  labels << "category " << tracklet.category << "\n";
  for (std::size_t f = 0; f < tracklet.frames.size(); ++f) {
    std::ostringstream name;
    name << std::setw(6) << std::setfill('0') << f << ".bin";
    write_kitti_velodyne((fs::path(dir) / "velodyne" / name.str()).string(),
                         tracklet.frames[f].cloud);
    if (tracklet.frames[f].gt) {
      const Box7& b = *tracklet.frames[f].gt;
      labels << f << " " << fmt17(b.x) << " " << fmt17(b.y) << " " << fmt17(b.z) << " "
             << fmt17(b.w) << " " << fmt17(b.l) << " " << fmt17(b.h) << " " << fmt17(b.yaw)
             << "\n";
    }
  }
  std::ofstream out(fs::path(dir) / "labels.txt");
  if (!out) throw DataError("save_tracklet: cannot write labels in " + dir);
  out << labels.str();
}

Tracklet load_tracklet(const std::string& dir) {
  fs::path base(dir);
  if (!fs::is_directory(base / "velodyne"))
    throw DataError("load_tracklet: " + dir + " has no velodyne/ directory");
  std::vector<fs::path> bins;
  for (const auto& entry : fs::directory_iterator(base / "velodyne"))
    if (entry.path().extension() == ".bin") bins.push_back(entry.path());
  std::sort(bins.begin(), bins.end());
  if (bins.empty()) throw DataError("load_tracklet: no frames in " + dir);

  Tracklet tracklet;
  tracklet.id = base.filename().string();
  for (const fs::path& bin : bins) {
    Frame frame;
    frame.cloud = read_kitti_velodyne(bin.string());
    tracklet.frames.push_back(std::move(frame));
  }

  std::ifstream labels(base / "labels.txt");
  if (!labels) throw DataError("load_tracklet: " + dir + " has no labels.txt");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(labels, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string first;
    ls >> first;
    if (first == "category") {
      ls >> tracklet.category;
      continue;
    }
    std::size_t frame_idx = 0;
    Box7 box;
    std::istringstream row(line);
    if (!(row >> frame_idx >> box.x >> box.y >> box.z >> box.w >> box.l >> box.h >> box.yaw))
      throw DataError("load_tracklet: " + dir + "/labels.txt line " + std::to_string(line_no) +
                      ": expected '<frame> x y z w l h yaw'");
    if (frame_idx >= tracklet.frames.size())
      throw DataError("load_tracklet: " + dir + "/labels.txt line " + std::to_string(line_no) +
                      ": frame " + std::to_string(frame_idx) + " out of range (have " +
                      std::to_string(tracklet.frames.size()) + " frames)");
    tracklet.frames[frame_idx].gt = box;
  }
  if (!tracklet.frames[0].gt)
    throw DataError("load_tracklet: " + dir + ": frame 0 has no GT box");
  return tracklet;
}

std::vector<Tracklet> load_tracklets(const std::string& root, const std::string& category) {
  if (!fs::is_directory(root)) throw DataError("load_tracklets: " + root + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "labels.txt"))
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<Tracklet> out;
  for (const fs::path& dir : dirs) {
    Tracklet t = load_tracklet(dir.string());
    if (category.empty() || t.category == category) out.push_back(std::move(t));
  }
  return out;
}

std::size_t synth_surface_count(const SynthSpec& spec) {
  double area = 2 * (spec.width * spec.length + spec.width * spec.height +
                     spec.length * spec.height);
  return static_cast<std::size_t>(std::llround(spec.surface_density * area));
}

Box7 synth_gt_box(const SynthSpec& spec, std::size_t frame, std::size_t frames) {
  validate_spec(spec);
  if (frames < 2) throw ParameterError("synth_gt_box: need at least 2 frames");
  if (frame >= frames) throw ParameterError("synth_gt_box: frame out of range");
  double t = static_cast<double>(frame) / static_cast<double>(frames - 1);
  double u = t * static_cast<double>(spec.waypoints.size() - 1);
  std::size_t seg = std::min(static_cast<std::size_t>(u), spec.waypoints.size() - 2);
  double frac = u - static_cast<double>(seg);
  const Waypoint& a = spec.waypoints[seg];
  const Waypoint& b = spec.waypoints[seg + 1];
  Box7 box;
  box.x = a.x + (b.x - a.x) * frac;
  box.y = a.y + (b.y - a.y) * frac;
  box.z = a.z + (b.z - a.z) * frac;
  box.w = spec.width;
  box.l = spec.length;
  box.h = spec.height;
  box.yaw = normalize_angle(a.yaw + normalize_angle(b.yaw - a.yaw) * frac);
  return box;
}

Tracklet generate_synthetic(const SynthSpec& spec, std::size_t frames) {
  validate_spec(spec);
  if (frames < 2) throw ParameterError("generate_synthetic: need at least 2 frames");
  const std::size_t surface_count = synth_surface_count(spec);
  const std::size_t clutter_count = static_cast<std::size_t>(
      std::llround(spec.clutter_density * (2 * kClutterHalfXY) * (2 * kClutterHalfXY) *
                   (2 * kClutterHalfZ)));
  Rng root(spec.seed);
  Tracklet tracklet;
  tracklet.id = "synth-" + std::to_string(spec.seed);
  for (std::size_t f = 0; f < frames; ++f) {
    Box7 gt = synth_gt_box(spec, f, frames);
    Rng surf_rng = root.fork(0x100000 + f);
    Rng clut_rng = root.fork(0x200000 + f);
    Rng drop_rng = root.fork(0x300000 + f);

    PointCloud local;
    local.feat_width = 1;
    for (std::size_t i = 0; i < surface_count; ++i) {
      double x, y, z;
      sample_surface_point(spec, surf_rng, x, y, z);
      local.coords.insert(local.coords.end(), {x, y, z});
      local.features.push_back(0.0);
    }
    PointCloud cloud = from_box_frame(local, gt);

    for (std::size_t i = 0; i < clutter_count; ++i) {
      cloud.coords.push_back(clut_rng.uniform(-kClutterHalfXY, kClutterHalfXY));
      cloud.coords.push_back(clut_rng.uniform(-kClutterHalfXY, kClutterHalfXY));
      cloud.coords.push_back(clut_rng.uniform(-kClutterHalfZ, kClutterHalfZ));
      cloud.features.push_back(0.0);
    }

    if (spec.dropout > 0) {
      std::vector<unsigned char> keep(cloud.size());
      for (std::size_t i = 0; i < cloud.size(); ++i)
        keep[i] = drop_rng.uniform() >= spec.dropout ? 1 : 0;
      cloud = select_points(cloud, keep);
    }

    Frame frame;
    frame.cloud = std::move(cloud);
    frame.gt = gt;
    tracklet.frames.push_back(std::move(frame));
  }
  return tracklet;
}

}  // namespace ptrack

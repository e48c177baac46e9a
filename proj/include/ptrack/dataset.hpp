#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ptrack/geometry.hpp"

namespace ptrack {

struct Frame {
  PointCloud cloud;
  std::optional<Box7> gt;
};

/// One tracked object instance over consecutive frames. Frame 0 always has a
/// GT box (evaluation initializes from it).
struct Tracklet {
  std::string id;
  std::string category = "Car";
  std::vector<Frame> frames;
};

/// Parses little-endian f32 (x, y, z, intensity) quadruples; intensity lands
/// in a single auxiliary feature column. File length must be a multiple of
/// 16 bytes; a 0-byte file is an empty cloud.
PointCloud read_kitti_velodyne(const std::string& path);
void write_kitti_velodyne(const std::string& path, const PointCloud& pc);

/// Directory layout per tracklet: <dir>/velodyne/NNNNNN.bin per frame plus
/// <dir>/labels.txt ("category <name>" header, then "<frame> x y z w l h yaw"
/// lines for frames with GT).
void save_tracklet(const std::string& dir, const Tracklet& tracklet);
Tracklet load_tracklet(const std::string& dir);

/// Loads every tracklet directory directly under root (sorted by name),
/// optionally filtered by category.
std::vector<Tracklet> load_tracklets(const std::string& root, const std::string& category = "");

struct Waypoint {
  double x = 0, y = 0, z = 0, yaw = 0;
};

/// Scene recipe for the deterministic generator. Surface density is points
/// per square meter of box surface; clutter density is points per cubic
/// meter over a 20 x 20 x 4 m region centered at the origin.
struct SynthSpec {
  double width = 2.0;
  double length = 4.0;
  double height = 1.6;
  double surface_density = 12.0;
  std::vector<Waypoint> waypoints;
  double clutter_density = 0.1;
  double dropout = 0.0;
  std::uint64_t seed = 0;
};

/// Number of object surface points implied by the spec's density.
std::size_t synth_surface_count(const SynthSpec& spec);

/// Ground-truth pose at frame f of `frames`: linear position along the
/// waypoint polyline, shortest-arc yaw interpolation.
Box7 synth_gt_box(const SynthSpec& spec, std::size_t frame, std::size_t frames);

/// Builds a tracklet of `frames` frames: box-surface samples at the
/// interpolated pose, uniform clutter, then dropout. The clutter and dropout
/// streams are forked independently of the surface stream, so changing one
/// knob never perturbs the others.
Tracklet generate_synthetic(const SynthSpec& spec, std::size_t frames);

}  // namespace ptrack

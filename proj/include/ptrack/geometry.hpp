#pragma once

#include <cstddef>
#include <vector>

#include "ptrack/rng.hpp"
#include "ptrack/tensor.hpp"

namespace ptrack {

/// Point set in meters. coords is flat row-major [N x 3]; features, when
/// non-empty, is flat row-major [N x feat_width] aligned with coords.
struct PointCloud {
  std::vector<double> coords;
  std::vector<double> features;
  std::size_t feat_width = 0;

  std::size_t size() const { return coords.size() / 3; }
  bool has_features() const { return feat_width != 0; }
  double x(std::size_t i) const { return coords[3 * i]; }
  double y(std::size_t i) const { return coords[3 * i + 1]; }
  double z(std::size_t i) const { return coords[3 * i + 2]; }
};

/// Oriented box: center, size (w along box x, l along box y, h along z), yaw
/// about the z axis.
struct Box7 {
  double x = 0, y = 0, z = 0;
  double w = 1, l = 1, h = 1;
  double yaw = 0;

  double volume() const { return w * l * h; }
};

/// Maps an angle to (-pi, pi].
double normalize_angle(double a);

/// Throws ParameterError unless sizes are positive and all fields finite.
void check_box(const Box7& b);

/// Per-point neighbor table. indices is flat [N x k]; row i lists neighbor
/// indices in ascending distance with point i itself first. neighbor_coords
/// is flat [N x k x 3]; neighbor_features ([N x k x feat_width]) is filled
/// only by feature-space queries.
struct NeighborGraph {
  std::size_t n = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;
  std::vector<double> neighbor_coords;
  std::vector<double> neighbor_features;
  std::size_t feat_width = 0;

  std::size_t at(std::size_t i, std::size_t j) const { return indices[i * k + j]; }
};

/// Draws exactly target points: without replacement when the cloud has at
/// least target points, with replacement otherwise. Features follow their
/// points. Throws DataError on an empty input.
PointCloud random_resample(const PointCloud& pc, std::size_t target, Rng& rng);

/// Euclidean k-NN over the cloud's own points. Each point is its own first
/// neighbor; remaining slots are sorted by squared distance, ties by lower
/// index. Throws ParameterError when k exceeds the point count.
NeighborGraph knn_coords(const PointCloud& pc, std::size_t k);

/// k-NN between rows of a feature map, maximizing exp(-|yi - yj|^2), i.e.
/// minimizing Euclidean feature distance. Same self-first and tie rules as
/// knn_coords. neighbor_features carries the gathered rows.
template <typename T>
NeighborGraph knn_features(const Tensor<T>& fmap, std::size_t k);

/// Inclusion mask: a point is inside iff its box-frame coordinates satisfy
/// |x| <= w/2, |y| <= l/2, |z| <= h/2. Boundaries count as inside.
std::vector<unsigned char> points_in_box(const PointCloud& pc, const Box7& box);

/// Exact IoU of two oriented boxes: convex clipping of the yaw-rotated
/// footprints times vertical overlap, over the union volume.
double iou3d(const Box7& a, const Box7& b);

/// Points of frame inside prev_box grown by margin on every side (so each
/// size gains 2 * margin). Throws ParameterError on negative margin.
PointCloud crop_search_area(const PointCloud& frame, const Box7& prev_box, double margin);

/// Applies a displacement given in prev_box's local frame plus a yaw delta.
/// Size is preserved; the resulting yaw is normalized.
Box7 apply_motion(const Box7& prev_box, double dx, double dy, double dz, double dyaw);

/// Rigid transforms between world coordinates and a box's local frame
/// (translate to the center, rotate by -yaw).
PointCloud to_box_frame(const PointCloud& pc, const Box7& box);
PointCloud from_box_frame(const PointCloud& pc, const Box7& box);
Box7 box_to_frame(const Box7& b, const Box7& frame);

/// Rows of the cloud's coordinates as a non-differentiable [N x 3] tensor.
template <typename T>
Tensor<T> coords_tensor(const PointCloud& pc);

/// Keeps the masked points (mask aligned with pc rows).
PointCloud select_points(const PointCloud& pc, const std::vector<unsigned char>& mask);

/// Appends all points of b to a (feature layouts must agree).
PointCloud merge_clouds(const PointCloud& a, const PointCloud& b);

}  // namespace ptrack

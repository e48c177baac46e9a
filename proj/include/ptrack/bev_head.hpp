#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "ptrack/correlation.hpp"
#include "ptrack/geometry.hpp"
#include "ptrack/tensor.hpp"

namespace ptrack {

/// Bird's-eye-view grid geometry. Extents are full spans centered on the
/// search-area origin: x covers [-extent_x/2, -extent_x/2 + cols * cell).
struct GridSpec {
  double extent_x = 11.2;
  double extent_y = 7.2;
  double cell = 0.3;

  std::size_t rows() const;  // ceil(extent_y / cell)
  std::size_t cols() const;  // ceil(extent_x / cell)
  /// Flat cell index (row * cols + col) for a point, or -1 when outside.
  std::ptrdiff_t cell_of(double x, double y) const;
  double cell_center_x(std::size_t col) const;
  double cell_center_y(std::size_t row) const;
};

template <typename T>
struct BEVGrid {
  GridSpec spec;
  Tensor<T> planes;                      // [C x H x W]
  std::vector<unsigned char> occupancy;  // H*W
  std::size_t dropped = 0;
};

/// Dense per-cell predictions, all sharing the grid's H x W.
template <typename T>
struct DetectionOutput {
  Tensor<T> heatmap;  // [1 x H x W] logits
  Tensor<T> offset;   // [2 x H x W] within-cell dx, dy in meters
  Tensor<T> zmap;     // [1 x H x W] vertical displacement in meters
  Tensor<T> yawmap;   // [2 x H x W] (cos, sin) of the yaw delta
};

template <typename T>
struct HeadParams {
  std::size_t in_channels = 0;
  std::size_t trunk_channels = 0;
  Tensor<T> k1, b1, k2, b2, k3, b3;          // 3x3 trunk
  Tensor<T> kh, bh, ko, bo, kz, bz, ky, by;  // 1x1 output heads
};

template <typename T>
HeadParams<T> make_head_params(std::size_t in_channels, std::size_t trunk_channels, Rng& rng);

template <typename T>
void collect_params(const std::string& prefix, HeadParams<T>& p, ParamList<T>& out);

/// Max-scatters the fusion features onto the grid; out-of-extent points are
/// dropped and counted.
template <typename T>
BEVGrid<T> scatter_to_bev(const FusionMap<T>& fusion, const GridSpec& spec);

/// Three 3x3 conv layers with rectifiers, then 1x1 heads.
template <typename T>
DetectionOutput<T> bev_head(const BEVGrid<T>& grid, const HeadParams<T>& p);

/// Picks the strongest occupied heatmap cell and assembles the world-frame
/// box: cell center plus offsets in the previous box's local frame, yaw from
/// atan2(sin, cos), size copied from prev_box. Empty occupancy -> nullopt.
template <typename T>
std::optional<Box7> decode_box(const DetectionOutput<T>& out, const BEVGrid<T>& grid,
                               const Box7& prev_box);

}  // namespace ptrack

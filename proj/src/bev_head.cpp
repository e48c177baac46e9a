#include "ptrack/bev_head.hpp"

#include <cmath>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

template <typename T>
Tensor<T> conv_kernel(std::size_t cout, std::size_t cin, std::size_t k, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>((cin + cout) * k * k));
  auto t = uniform_tensor<T>({cout, cin, k, k}, static_cast<T>(-bound), static_cast<T>(bound), rng);
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> conv_bias(std::size_t cout) {
  auto t = Tensor<T>::zeros({cout});
  t.set_requires_grad(true);
  return t;
}

}  // namespace

std::size_t GridSpec::rows() const {
  if (extent_y <= 0 || cell <= 0) throw ParameterError("grid: extents and cell must be positive");
  return static_cast<std::size_t>(std::ceil(extent_y / cell));
}

std::size_t GridSpec::cols() const {
  if (extent_x <= 0 || cell <= 0) throw ParameterError("grid: extents and cell must be positive");
  return static_cast<std::size_t>(std::ceil(extent_x / cell));
}

std::ptrdiff_t GridSpec::cell_of(double x, double y) const {
  const double fx = (x + extent_x / 2) / cell;
  const double fy = (y + extent_y / 2) / cell;
  if (fx < 0 || fy < 0) return -1;
  const auto col = static_cast<std::size_t>(fx);
  const auto row = static_cast<std::size_t>(fy);
  if (col >= cols() || row >= rows()) return -1;
  return static_cast<std::ptrdiff_t>(row * cols() + col);
}

double GridSpec::cell_center_x(std::size_t col) const {
  return -extent_x / 2 + (static_cast<double>(col) + 0.5) * cell;
}

double GridSpec::cell_center_y(std::size_t row) const {
  return -extent_y / 2 + (static_cast<double>(row) + 0.5) * cell;
}

template <typename T>
HeadParams<T> make_head_params(std::size_t in_channels, std::size_t trunk_channels, Rng& rng) {
  if (in_channels == 0 || trunk_channels == 0)
    throw ParameterError("head: channel counts must be positive");
  HeadParams<T> p;
  p.in_channels = in_channels;
  p.trunk_channels = trunk_channels;
  p.k1 = conv_kernel<T>(trunk_channels, in_channels, 3, rng);
  p.b1 = conv_bias<T>(trunk_channels);
  p.k2 = conv_kernel<T>(trunk_channels, trunk_channels, 3, rng);
  p.b2 = conv_bias<T>(trunk_channels);
  p.k3 = conv_kernel<T>(trunk_channels, trunk_channels, 3, rng);
  p.b3 = conv_bias<T>(trunk_channels);
  p.kh = conv_kernel<T>(1, trunk_channels, 1, rng);
  p.bh = conv_bias<T>(1);
  p.ko = conv_kernel<T>(2, trunk_channels, 1, rng);
  p.bo = conv_bias<T>(2);
  p.kz = conv_kernel<T>(1, trunk_channels, 1, rng);
  p.bz = conv_bias<T>(1);
  p.ky = conv_kernel<T>(2, trunk_channels, 1, rng);
  p.by = conv_bias<T>(2);
  return p;
}

template <typename T>
void collect_params(const std::string& prefix, HeadParams<T>& p, ParamList<T>& out) {
  out.emplace_back(prefix + ".k1", p.k1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".k2", p.k2);
  out.emplace_back(prefix + ".b2", p.b2);
  out.emplace_back(prefix + ".k3", p.k3);
  out.emplace_back(prefix + ".b3", p.b3);
  out.emplace_back(prefix + ".kh", p.kh);
  out.emplace_back(prefix + ".bh", p.bh);
  out.emplace_back(prefix + ".ko", p.ko);
  out.emplace_back(prefix + ".bo", p.bo);
  out.emplace_back(prefix + ".kz", p.kz);
  out.emplace_back(prefix + ".bz", p.bz);
  out.emplace_back(prefix + ".ky", p.ky);
  out.emplace_back(prefix + ".by", p.by);
}

template <typename T>
BEVGrid<T> scatter_to_bev(const FusionMap<T>& fusion, const GridSpec& spec) {
  const std::size_t n = fusion.coords.size();
  if (fusion.features.rank() != 2 || fusion.features.rows() != n)
    throw DimensionError("scatter_to_bev: fusion features not aligned with points");
  std::vector<std::ptrdiff_t> cells(n);
  for (std::size_t i = 0; i < n; ++i)
    cells[i] = spec.cell_of(fusion.coords.x(i), fusion.coords.y(i));

  auto scattered = scatter_max_bev(fusion.features, cells, spec.rows(), spec.cols());
  BEVGrid<T> grid;
  grid.spec = spec;
  grid.planes = scattered.planes;
  grid.occupancy = std::move(scattered.occupancy);
  grid.dropped = scattered.dropped;
  return grid;
}

template <typename T>
DetectionOutput<T> bev_head(const BEVGrid<T>& grid, const HeadParams<T>& p) {
  auto t = relu(conv2d(grid.planes, p.k1, p.b1));
  t = relu(conv2d(t, p.k2, p.b2));
  t = relu(conv2d(t, p.k3, p.b3));
  DetectionOutput<T> out;
  out.heatmap = conv2d(t, p.kh, p.bh);
  out.offset = conv2d(t, p.ko, p.bo);
  out.zmap = conv2d(t, p.kz, p.bz);
  out.yawmap = conv2d(t, p.ky, p.by);
  return out;
}

template <typename T>
std::optional<Box7> decode_box(const DetectionOutput<T>& out, const BEVGrid<T>& grid,
                               const Box7& prev_box) {
  const std::size_t h = grid.spec.rows(), w = grid.spec.cols();
  const std::size_t cells = h * w;
  std::size_t best = cells;
  for (std::size_t c = 0; c < cells; ++c) {
    if (!grid.occupancy[c]) continue;
    if (best == cells || out.heatmap.values()[c] > out.heatmap.values()[best]) best = c;
  }
  if (best == cells) return std::nullopt;

  const std::size_t row = best / w, col = best % w;
  const double dx = grid.spec.cell_center_x(col) + static_cast<double>(out.offset.values()[best]);
  const double dy =
      grid.spec.cell_center_y(row) + static_cast<double>(out.offset.values()[cells + best]);
  const double dz = static_cast<double>(out.zmap.values()[best]);
  const double cos_t = static_cast<double>(out.yawmap.values()[best]);
  const double sin_t = static_cast<double>(out.yawmap.values()[cells + best]);
  const double dyaw = std::atan2(sin_t, cos_t);
  return apply_motion(prev_box, dx, dy, dz, dyaw);
}

#define PTRACK_INSTANTIATE_HEAD(T)                                                          \
  template HeadParams<T> make_head_params(std::size_t, std::size_t, Rng&);                  \
  template void collect_params(const std::string&, HeadParams<T>&, ParamList<T>&);          \
  template BEVGrid<T> scatter_to_bev(const FusionMap<T>&, const GridSpec&);                 \
  template DetectionOutput<T> bev_head(const BEVGrid<T>&, const HeadParams<T>&);            \
  template std::optional<Box7> decode_box(const DetectionOutput<T>&, const BEVGrid<T>&,     \
                                          const Box7&);

PTRACK_INSTANTIATE_HEAD(float)
PTRACK_INSTANTIATE_HEAD(double)

#undef PTRACK_INSTANTIATE_HEAD

}  // namespace ptrack

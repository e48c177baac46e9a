#include "ptrack/bev_head.hpp"

#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ptrack/errors.hpp"

using namespace ptrack;

namespace {

constexpr double kPi = std::numbers::pi;

FusionMap<double> map_of(std::vector<double> coords, std::vector<double> feats, std::size_t c) {
  FusionMap<double> m;
  m.coords.coords = std::move(coords);
  m.features = Tensor<double>::from({m.coords.size(), c}, std::move(feats));
  return m;
}

}  // namespace

TEST_CASE("grid spec: default dimensions and the cell map") {
  GridSpec g;
  CHECK(g.rows() == 24);  // 7.2 / 0.3
  CHECK(g.cols() == 38);  // ceil(11.2 / 0.3)

  CHECK(g.cell_of(0.0, 0.0) == static_cast<std::ptrdiff_t>(12 * 38 + 18));
  CHECK(g.cell_of(-100.0, 0.0) == -1);
  CHECK(g.cell_of(0.0, 100.0) == -1);
  // Left/bottom edges are inside; the spanned area covers the stated extents.
  CHECK(g.cell_of(-5.6, -3.6) == 0);

  const auto c = g.cell_of(1.0, -2.0);
  REQUIRE(c >= 0);
  const std::size_t row = static_cast<std::size_t>(c) / g.cols();
  const std::size_t col = static_cast<std::size_t>(c) % g.cols();
  CHECK(std::abs(g.cell_center_x(col) - 1.0) <= g.cell / 2 + 1e-12);
  CHECK(std::abs(g.cell_center_y(row) - (-2.0)) <= g.cell / 2 + 1e-12);

  GridSpec bad;
  bad.cell = 0;
  CHECK_THROWS_AS(bad.rows(), ParameterError);
}

TEST_CASE("scatter_to_bev: single point occupies exactly one cell") {
  auto m = map_of({0, 0, 0}, {1.5, -2.5}, 2);
  GridSpec g;
  auto grid = scatter_to_bev(m, g);
  REQUIRE(grid.planes.shape() == Shape{2, 24, 38});
  CHECK(grid.dropped == 0);
  std::size_t occupied = 0;
  for (auto o : grid.occupancy) occupied += o;
  CHECK(occupied == 1);
  const auto cell = static_cast<std::size_t>(g.cell_of(0, 0));
  CHECK(grid.occupancy[cell] == 1);
  CHECK(grid.planes.values()[cell] == 1.5);
  CHECK(grid.planes.values()[24 * 38 + cell] == -2.5);
}

TEST_CASE("scatter_to_bev: cellwise max of co-located points, drops counted") {
  auto m = map_of({0.01, 0.01, 0, 0.02, 0.02, 5, 99, 0, 0}, {1, 7, 4, 2, 0, 0}, 2);
  GridSpec g;
  auto grid = scatter_to_bev(m, g);
  CHECK(grid.dropped == 1);
  const auto cell = static_cast<std::size_t>(g.cell_of(0.01, 0.01));
  CHECK(grid.planes.values()[cell] == 4.0);                // max(1, 4)
  CHECK(grid.planes.values()[24 * 38 + cell] == 7.0);      // max(7, 2)
}

TEST_CASE("gradient check through scatter_to_bev") {
  Rng rng(1);
  FusionMap<double> m;
  m.coords.coords = {0, 0, 0, 0.5, 0.5, 0, -1, 2, 0, 3, -3, 0, 0.05, 0.05, 0};
  m.features = uniform_tensor<double>({5, 3}, -1.0, 1.0, rng);
  m.features.set_requires_grad(true);
  GridSpec g;
  ParamList<double> params{{"features", m.features}};
  auto loss = [&] { return sum_all(square(scatter_to_bev(m, g).planes)); };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  CHECK(report.all_passed);
}

TEST_CASE("bev_head: zero input and zero biases give zero maps; shapes hold") {
  Rng rng(2);
  auto p = make_head_params<double>(3, 4, rng);
  BEVGrid<double> grid;
  grid.spec = GridSpec{2.4, 2.4, 0.3};  // 8 x 8
  grid.planes = Tensor<double>::zeros({3, 8, 8});
  grid.occupancy.assign(64, 0);
  auto out = bev_head(grid, p);
  REQUIRE(out.heatmap.shape() == Shape{1, 8, 8});
  REQUIRE(out.offset.shape() == Shape{2, 8, 8});
  REQUIRE(out.zmap.shape() == Shape{1, 8, 8});
  REQUIRE(out.yawmap.shape() == Shape{2, 8, 8});
  for (double v : out.heatmap.values()) CHECK(v == 0.0);
  for (double v : out.offset.values()) CHECK(v == 0.0);
  for (double v : out.yawmap.values()) CHECK(v == 0.0);
}

TEST_CASE("gradient check: bev_head on an 8x8 grid") {
  Rng rng(3);
  auto p = make_head_params<double>(3, 4, rng);
  BEVGrid<double> grid;
  grid.spec = GridSpec{2.4, 2.4, 0.3};
  grid.planes = uniform_tensor<double>({3, 8, 8}, -1.0, 1.0, rng);
  grid.occupancy.assign(64, 1);
  ParamList<double> params;
  collect_params("head", p, params);
  auto loss = [&] {
    auto out = bev_head(grid, p);
    auto s = add(sum_all(square(out.heatmap)), sum_all(square(out.offset)));
    return add(s, add(sum_all(square(out.zmap)), sum_all(square(out.yawmap))));
  };
  auto report = finite_diff_check<double>(loss, params, 1e-5, 1e-5);
  INFO("worst ", report.worst);
  CHECK(report.all_passed);
}

TEST_CASE("decode_box: single occupied cell with neutral regressions") {
  GridSpec g;
  const std::size_t h = g.rows(), w = g.cols(), cells = h * w;
  BEVGrid<double> grid;
  grid.spec = g;
  grid.occupancy.assign(cells, 0);
  const std::size_t row = 5, col = 20;
  grid.occupancy[row * w + col] = 1;

  DetectionOutput<double> out;
  out.heatmap = Tensor<double>::zeros({1, h, w});
  out.offset = Tensor<double>::zeros({2, h, w});
  out.zmap = Tensor<double>::zeros({1, h, w});
  std::vector<double> yaw(2 * cells, 0.0);
  for (std::size_t c = 0; c < cells; ++c) yaw[c] = 1.0;  // cos=1, sin=0
  out.yawmap = Tensor<double>::from({2, h, w}, yaw);

  Box7 prev{10, -4, 1, 2, 3, 1.5, 0.0};
  auto got = decode_box(out, grid, prev);
  REQUIRE(got.has_value());
  CHECK(got->x == doctest::Approx(prev.x + g.cell_center_x(col)));
  CHECK(got->y == doctest::Approx(prev.y + g.cell_center_y(row)));
  CHECK(got->z == doctest::Approx(prev.z));
  CHECK(got->yaw == doctest::Approx(prev.yaw));
  CHECK(got->w == prev.w);
  CHECK(got->l == prev.l);
  CHECK(got->h == prev.h);
}

TEST_CASE("decode_box: argmax among occupied cells only") {
  GridSpec g{1.2, 1.2, 0.3};  // 4 x 4
  BEVGrid<double> grid;
  grid.spec = g;
  grid.occupancy.assign(16, 0);
  grid.occupancy[3] = 1;
  grid.occupancy[9] = 1;

  DetectionOutput<double> out;
  std::vector<double> heat(16, 0.0);
  heat[5] = 100.0;  // unoccupied: must be ignored
  heat[3] = 1.0;
  heat[9] = 2.0;
  out.heatmap = Tensor<double>::from({1, 4, 4}, heat);
  out.offset = Tensor<double>::zeros({2, 4, 4});
  out.zmap = Tensor<double>::zeros({1, 4, 4});
  std::vector<double> yaw(32, 0.0);
  for (std::size_t c = 0; c < 16; ++c) yaw[c] = 1.0;
  out.yawmap = Tensor<double>::from({2, 4, 4}, yaw);

  Box7 prev{0, 0, 0, 1, 1, 1, 0};
  auto got = decode_box(out, grid, prev);
  REQUIRE(got.has_value());
  // winning cell 9 -> row 2, col 1
  CHECK(got->x == doctest::Approx(g.cell_center_x(1)));
  CHECK(got->y == doctest::Approx(g.cell_center_y(2)));

  grid.occupancy.assign(16, 0);
  CHECK_FALSE(decode_box(out, grid, prev).has_value());
}

TEST_CASE("yaw decoding inverts the (cos, sin) encoding over (-pi, pi]") {
  GridSpec g{0.3, 0.3, 0.3};  // single cell
  BEVGrid<double> grid;
  grid.spec = g;
  grid.occupancy.assign(1, 1);
  Box7 prev{0, 0, 0, 1, 1, 1, 0};
  for (double theta = -kPi + 1e-6; theta <= kPi; theta += 0.1) {
    DetectionOutput<double> out;
    out.heatmap = Tensor<double>::zeros({1, 1, 1});
    out.offset = Tensor<double>::zeros({2, 1, 1});
    out.zmap = Tensor<double>::zeros({1, 1, 1});
    out.yawmap = Tensor<double>::from({2, 1, 1}, {std::cos(theta), std::sin(theta)});
    auto got = decode_box(out, grid, prev);
    REQUIRE(got.has_value());
    CHECK(std::abs(got->yaw - theta) < 1e-12);
  }
}

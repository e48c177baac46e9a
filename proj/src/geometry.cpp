#include "ptrack/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <utility>

#include "ptrack/errors.hpp"

namespace ptrack {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kClipEps = 1e-9;

struct V2 {
  double x, y;
};

double cross(const V2& o, const V2& a, const V2& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// CCW footprint corners of the yaw-rotated box in world xy.
std::array<V2, 4> footprint(const Box7& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hw = b.w / 2, hl = b.l / 2;
  const std::array<std::pair<double, double>, 4> local{{{hw, hl}, {-hw, hl}, {-hw, -hl}, {hw, -hl}}};
  std::array<V2, 4> out;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto [lx, ly] = local[i];
    out[i] = {c * lx - s * ly + b.x, s * lx + c * ly + b.y};
  }
  return out;
}

double polygon_area(const std::vector<V2>& p) {
  if (p.size() < 3) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const V2& a = p[i];
    const V2& b = p[(i + 1) % p.size()];
    acc += a.x * b.y - b.x * a.y;
  }
  return std::abs(acc) / 2.0;
}

// Clips a convex subject polygon against a convex CCW clipper.
std::vector<V2> convex_clip(std::vector<V2> subject, const std::array<V2, 4>& clipper) {
  for (std::size_t e = 0; e < clipper.size() && !subject.empty(); ++e) {
    const V2& ca = clipper[e];
    const V2& cb = clipper[(e + 1) % clipper.size()];
    std::vector<V2> input = std::move(subject);
    subject.clear();
    V2 prev = input.back();
    double dprev = cross(ca, cb, prev);
    for (const V2& cur : input) {
      const double dcur = cross(ca, cb, cur);
      const bool cur_in = dcur >= -kClipEps;
      const bool prev_in = dprev >= -kClipEps;
      if (cur_in != prev_in) {
        const double t = dprev / (dprev - dcur);
        subject.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (cur_in) subject.push_back(cur);
      prev = cur;
      dprev = dcur;
    }
  }
  return subject;
}

// Shared k-NN core over row-major data[n x dim]: self first, then ascending
// squared distance with ties broken by lower index.
std::vector<std::size_t> knn_rows(const double* data, std::size_t n, std::size_t dim,
                                  std::size_t k) {
  if (k == 0) throw ParameterError("knn: k must be positive");
  if (k > n) throw ParameterError("knn: k=" + std::to_string(k) + " exceeds point count " +
                                  std::to_string(n));
  std::vector<std::size_t> indices(n * k);
  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    const double* pi = data + i * dim;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double* pj = data + j * dim;
      double d2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = pi[d] - pj[d];
        d2 += diff * diff;
      }
      cand.emplace_back(d2, j);
    }
    const std::size_t rest = k - 1;
    std::partial_sort(cand.begin(), cand.begin() + rest, cand.end());
    indices[i * k] = i;
    for (std::size_t r = 0; r < rest; ++r) indices[i * k + 1 + r] = cand[r].second;
  }
  return indices;
}

void check_cloud(const PointCloud& pc, const char* who) {
  if (pc.coords.size() % 3 != 0)
    throw DataError(std::string(who) + ": coordinate buffer length is not a multiple of 3");
  if (pc.has_features() && pc.features.size() != pc.size() * pc.feat_width)
    throw DataError(std::string(who) + ": feature buffer not aligned with points");
}

void push_point(PointCloud& dst, const PointCloud& src, std::size_t i) {
  dst.coords.insert(dst.coords.end(), src.coords.begin() + 3 * i, src.coords.begin() + 3 * i + 3);
  if (src.has_features())
    dst.features.insert(dst.features.end(), src.features.begin() + i * src.feat_width,
                        src.features.begin() + (i + 1) * src.feat_width);
}

}  // namespace

double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

void check_box(const Box7& b) {
  const bool finite = std::isfinite(b.x) && std::isfinite(b.y) && std::isfinite(b.z) &&
                      std::isfinite(b.w) && std::isfinite(b.l) && std::isfinite(b.h) &&
                      std::isfinite(b.yaw);
  if (!finite) throw ParameterError("box: non-finite field");
  if (b.w <= 0 || b.l <= 0 || b.h <= 0) throw ParameterError("box: sizes must be positive");
}

PointCloud random_resample(const PointCloud& pc, std::size_t target, Rng& rng) {
  check_cloud(pc, "random_resample");
  const std::size_t n = pc.size();
  if (n == 0) throw DataError("random_resample: empty point cloud");

  PointCloud out;
  out.feat_width = pc.feat_width;
  out.coords.reserve(target * 3);
  if (pc.has_features()) out.features.reserve(target * pc.feat_width);
  if (n >= target) {
    for (std::size_t i : rng.sample_without_replacement(n, target)) push_point(out, pc, i);
  } else {
    for (std::size_t t = 0; t < target; ++t) push_point(out, pc, rng.uniform_index(n));
  }
  return out;
}

NeighborGraph knn_coords(const PointCloud& pc, std::size_t k) {
  check_cloud(pc, "knn_coords");
  const std::size_t n = pc.size();
  NeighborGraph g;
  g.n = n;
  g.k = k;
  g.indices = knn_rows(pc.coords.data(), n, 3, k);
  g.neighbor_coords.resize(n * k * 3);
  for (std::size_t i = 0; i < n * k; ++i) {
    const std::size_t j = g.indices[i];
    std::copy_n(pc.coords.data() + 3 * j, 3, g.neighbor_coords.data() + 3 * i);
  }
  return g;
}

template <typename T>
NeighborGraph knn_features(const Tensor<T>& fmap, std::size_t k) {
  if (fmap.rank() != 2)
    throw DimensionError("knn_features: expected [N x C] feature map, got " + shape_str(fmap.shape()));
  const std::size_t n = fmap.rows(), c = fmap.cols();
  std::vector<double> rows(n * c);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<double>(fmap.values()[i]);

  NeighborGraph g;
  g.n = n;
  g.k = k;
  g.feat_width = c;
  g.indices = knn_rows(rows.data(), n, c, k);
  g.neighbor_features.resize(n * k * c);
  for (std::size_t i = 0; i < n * k; ++i) {
    const std::size_t j = g.indices[i];
    std::copy_n(rows.data() + j * c, c, g.neighbor_features.data() + i * c);
  }
  return g;
}

std::vector<unsigned char> points_in_box(const PointCloud& pc, const Box7& box) {
  check_cloud(pc, "points_in_box");
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hw = box.w / 2, hl = box.l / 2, hh = box.h / 2;
  std::vector<unsigned char> mask(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double dx = pc.x(i) - box.x;
    const double dy = pc.y(i) - box.y;
    const double dz = pc.z(i) - box.z;
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    mask[i] = std::abs(lx) <= hw && std::abs(ly) <= hl && std::abs(dz) <= hh ? 1 : 0;
  }
  return mask;
}

double iou3d(const Box7& a, const Box7& b) {
  check_box(a);
  check_box(b);
  const double za0 = a.z - a.h / 2, za1 = a.z + a.h / 2;
  const double zb0 = b.z - b.h / 2, zb1 = b.z + b.h / 2;
  const double oz = std::min(za1, zb1) - std::max(za0, zb0);
  if (oz <= 0) return 0.0;

  const auto fa = footprint(a);
  const auto fb = footprint(b);
  const double area = polygon_area(convex_clip({fa.begin(), fa.end()}, fb));
  const double inter = area * oz;
  if (inter <= 0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return std::min(inter / uni, 1.0);
}

PointCloud crop_search_area(const PointCloud& frame, const Box7& prev_box, double margin) {
  if (margin < 0) throw ParameterError("crop_search_area: margin must be non-negative");
  Box7 grown = prev_box;
  grown.w += 2 * margin;
  grown.l += 2 * margin;
  grown.h += 2 * margin;
  return select_points(frame, points_in_box(frame, grown));
}

Box7 apply_motion(const Box7& prev_box, double dx, double dy, double dz, double dyaw) {
  const double c = std::cos(prev_box.yaw), s = std::sin(prev_box.yaw);
  Box7 out = prev_box;
  out.x = prev_box.x + c * dx - s * dy;
  out.y = prev_box.y + s * dx + c * dy;
  out.z = prev_box.z + dz;
  out.yaw = normalize_angle(prev_box.yaw + dyaw);
  return out;
}

PointCloud to_box_frame(const PointCloud& pc, const Box7& box) {
  check_cloud(pc, "to_box_frame");
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  PointCloud out = pc;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double dx = pc.x(i) - box.x;
    const double dy = pc.y(i) - box.y;
    out.coords[3 * i] = c * dx + s * dy;
    out.coords[3 * i + 1] = -s * dx + c * dy;
    out.coords[3 * i + 2] = pc.z(i) - box.z;
  }
  return out;
}

PointCloud from_box_frame(const PointCloud& pc, const Box7& box) {
  check_cloud(pc, "from_box_frame");
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  PointCloud out = pc;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double lx = pc.x(i), ly = pc.y(i);
    out.coords[3 * i] = c * lx - s * ly + box.x;
    out.coords[3 * i + 1] = s * lx + c * ly + box.y;
    out.coords[3 * i + 2] = pc.z(i) + box.z;
  }
  return out;
}

Box7 box_to_frame(const Box7& b, const Box7& frame) {
  const double c = std::cos(frame.yaw), s = std::sin(frame.yaw);
  const double dx = b.x - frame.x, dy = b.y - frame.y;
  Box7 out = b;
  out.x = c * dx + s * dy;
  out.y = -s * dx + c * dy;
  out.z = b.z - frame.z;
  out.yaw = normalize_angle(b.yaw - frame.yaw);
  return out;
}

template <typename T>
Tensor<T> coords_tensor(const PointCloud& pc) {
  check_cloud(pc, "coords_tensor");
  std::vector<T> v(pc.coords.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(pc.coords[i]);
  return Tensor<T>::from({pc.size(), 3}, std::move(v));
}

PointCloud select_points(const PointCloud& pc, const std::vector<unsigned char>& mask) {
  check_cloud(pc, "select_points");
  if (mask.size() != pc.size())
    throw DimensionError("select_points: mask size " + std::to_string(mask.size()) +
                         " != point count " + std::to_string(pc.size()));
  PointCloud out;
  out.feat_width = pc.feat_width;
  for (std::size_t i = 0; i < pc.size(); ++i)
    if (mask[i]) push_point(out, pc, i);
  return out;
}

PointCloud merge_clouds(const PointCloud& a, const PointCloud& b) {
  check_cloud(a, "merge_clouds");
  check_cloud(b, "merge_clouds");
  if (a.feat_width != b.feat_width)
    throw DimensionError("merge_clouds: feature widths disagree");
  PointCloud out = a;
  out.coords.insert(out.coords.end(), b.coords.begin(), b.coords.end());
  out.features.insert(out.features.end(), b.features.begin(), b.features.end());
  return out;
}

template NeighborGraph knn_features(const Tensor<float>&, std::size_t);
template NeighborGraph knn_features(const Tensor<double>&, std::size_t);
template Tensor<float> coords_tensor(const PointCloud&);
template Tensor<double> coords_tensor(const PointCloud&);

}  // namespace ptrack

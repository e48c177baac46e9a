#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ptrack/errors.hpp"
#include "ptrack/rng.hpp"

namespace ptrack {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until the backward pass touches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

bool& grad_mode();

}  // namespace detail

/// Disables graph recording while alive. Used on inference paths so forward
/// passes do not retain intermediates.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense tensor handle with reverse-mode gradient accumulation. Copies share
/// the underlying node, so a copied handle sees in-place value updates.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor from(Shape shape, std::vector<T> values);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->values.size(); }
  std::size_t rank() const { return node_->shape.size(); }

  /// Rank-2 accessors.
  std::size_t rows() const;
  std::size_t cols() const;
  T operator()(std::size_t i, std::size_t j) const { return node_->values[i * cols() + j]; }

  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& values_mut() { return node_->values; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->values.size(), T(0)); }

  /// Reverse-mode pass from a scalar. Accumulates into the grad buffers of
  /// every reachable tensor with requires_grad set.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---- differentiable primitives ------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
/// x[N x C] + row-broadcast bias b[C].
template <typename T> Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// elu(x) + 1: the positive kernel feature map used by linear attention.
/// Strictly positive for all finite inputs (underflow is clamped to the
/// smallest normal value).
template <typename T> Tensor<T> elu1(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> vlog(const Tensor<T>& x);
template <typename T> Tensor<T> vabs(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);

template <typename T> Tensor<T> sum_all(const Tensor<T>& x);           // -> [1]
template <typename T> Tensor<T> row_sums(const Tensor<T>& x);          // [N x C] -> [N x 1]
template <typename T> Tensor<T> col_sums(const Tensor<T>& x);          // [N x C] -> [1 x C]
template <typename T> Tensor<T> mul_cols(const Tensor<T>& x, const Tensor<T>& s);  // s: [N x 1]
template <typename T> Tensor<T> div_cols(const Tensor<T>& x, const Tensor<T>& s);  // s: [N x 1]

template <typename T> Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
template <typename T> Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx);
template <typename T> Tensor<T> repeat_rows(const Tensor<T>& x, std::size_t times);
/// [N*k x C] -> [N x C], summing each block of k consecutive rows.
template <typename T> Tensor<T> group_sum_rows(const Tensor<T>& x, std::size_t k);
/// [N*k x C] -> [N x C], elementwise max over each block; first max wins.
template <typename T> Tensor<T> group_max_rows(const Tensor<T>& x, std::size_t k);

/// Per-row mean/variance normalization with learned scale and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// Same-padded cross-correlation. input [Cin x H x W], kernels
/// [Cout x Cin x k x k] with odd k, bias [Cout] -> [Cout x H x W].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias);

template <typename T>
struct BevScatter {
  Tensor<T> planes;                      // [C x H x W]
  std::vector<unsigned char> occupancy;  // H*W, 1 where a point landed
  std::size_t dropped = 0;               // points outside the grid
};

/// Max-scatter of per-point features onto a dense grid. cell_of_point holds
/// the flat cell index (row * W + col) per point, or -1 for dropped points.
/// The max subgradient routes to the first point attaining the cell maximum.
template <typename T>
BevScatter<T> scatter_max_bev(const Tensor<T>& features,
                              const std::vector<std::ptrdiff_t>& cell_of_point,
                              std::size_t grid_h, std::size_t grid_w);

// ---- parameters and initialization ---------------------------------------

template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T> Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
template <typename T> Tensor<T> uniform_tensor(Shape shape, T lo, T hi, Rng& rng);

template <typename T> void zero_grads(ParamList<T>& params);

// ---- finite-difference gradient checking ---------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  bool all_passed = true;
};

/// Compares analytic gradients of f() against central finite differences for
/// every element of every listed parameter.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f, ParamList<T>& params,
                                  double step, double tol);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ptrack

#include "ptrack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace ptrack {

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

namespace {

template <typename T>
using Node = detail::TensorNode<T>;

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
Tensor<T> make_leaf(Shape shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not match value count " +
                         std::to_string(values.size()));
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  return Tensor<T>(std::move(n));
}

// Records parents and a backward closure only when grad mode is on and some
// parent participates in differentiation.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool needs = false;
  if (detail::grad_mode()) {
    for (const auto& p : parents) needs = needs || p.node()->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void check_rank2(const Tensor<T>& x, const char* who) {
  if (x.rank() != 2) throw DimensionError(std::string(who) + ": expected rank-2 tensor, got " + shape_str(x.shape()));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Elementwise op with derivative computed from (x, y) per element.
template <typename T, typename Fwd, typename Dx>
Tensor<T> elementwise(const Tensor<T>& x, Fwd fwd, Dx dx_of) {
  std::vector<T> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  auto px = x.node();
  return make_op<T>(x.shape(), std::move(out), {x}, [px, dx_of](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < self.values.size(); ++i)
      px->grad[i] += self.grad[i] * dx_of(px->values[i], self.values[i]);
  });
}

}  // namespace

// ---- Tensor members -------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  std::vector<T> v(shape_numel(shape), T(0));
  return make_leaf<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  std::vector<T> v(shape_numel(shape), value);
  return make_leaf<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
  return make_leaf<T>(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return make_leaf<T>({1}, {value});
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  check_rank2(*this, "rows");
  return node_->shape[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  check_rank2(*this, "cols");
  return node_->shape[1];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->values[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool v) {
  if (v && node_->backward) throw ParameterError("set_requires_grad: only leaf tensors can become parameters");
  node_->requires_grad = v;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ParameterError("backward: output must be scalar, got " + shape_str(shape()));
  if (!node_->requires_grad)
    throw ParameterError("backward: output does not depend on any differentiable input");

  // Post-order over the parent DAG; reverse order processes children first.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& fr = stack.back();
    if (fr.next < fr.n->parents.size()) {
      Node* p = fr.n->parents[fr.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(fr.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// ---- primitives -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  {
    const T* A = a.values().data();
    const T* B = b.values().data();
    T* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      const T* ai = A + i * k;
      T* ci = C + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = ai[kk];
        const T* bk = B + kk * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
      }
    }
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>({m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](Node<T>& self) {
    const T* G = self.grad.data();
    if (pa->requires_grad) {
      pa->ensure_grad();
      const T* B = pb->values.data();
      // dA = G . B^T
      for (std::size_t i = 0; i < m; ++i) {
        const T* gi = G + i * n;
        T* dai = pa->grad.data() + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T* bk = B + kk * n;
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bk[j];
          dai[kk] += acc;
        }
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      const T* A = pa->values.data();
      // dB = A^T . G
      for (std::size_t i = 0; i < m; ++i) {
        const T* ai = A + i * k;
        const T* gi = G + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T av = ai[kk];
          T* dbk = pb->grad.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) dbk[j] += av * gi[j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  check_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<T> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  auto pa = a.node();
  return make_op<T>({n, m}, std::move(out), {a}, [pa, m, n](Node<T>& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b}, [pa, pb](Node<T>& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->values[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->values[i];
    }
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return elementwise(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return elementwise(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  check_rank2(x, "add_rowvec");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (b.numel() != c)
    throw DimensionError("add_rowvec: bias " + shape_str(b.shape()) + " does not match row width " +
                         std::to_string(c));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + b.values()[j];
  auto px = x.node();
  auto pb = b.node();
  return make_op<T>(x.shape(), std::move(out), {x, b}, [px, pb, n, c](Node<T>& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) pb->grad[j] += self.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return elementwise(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> elu1(const Tensor<T>& x) {
  // exp underflows to 0 for very negative inputs; clamp so the output stays
  // strictly positive as the kernel feature map requires.
  return elementwise(
      x,
      [](T v) {
        constexpr T floor = std::numeric_limits<T>::min();
        const T y = v >= T(0) ? v + T(1) : std::exp(v);
        return y < floor ? floor : y;
      },
      [](T v, T) { return v >= T(0) ? T(1) : std::exp(v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return elementwise(
      x,
      [](T v) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return elementwise(
      x,
      [](T v) {
        if (v > T(30)) return v;
        if (v < T(-30)) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](T v, T) {
        return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      });
}

template <typename T>
Tensor<T> vlog(const Tensor<T>& x) {
  return elementwise(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> vabs(const Tensor<T>& x) {
  return elementwise(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return elementwise(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.values()) acc += v;
  auto px = x.node();
  return make_op<T>({1}, {acc}, {x}, [px](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const T g = self.grad[0];
    for (auto& d : px->grad) d += g;
  });
}

template <typename T>
Tensor<T> row_sums(const Tensor<T>& x) {
  check_rank2(x, "row_sums");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i] += x.values()[i * c + j];
  auto px = x.node();
  return make_op<T>({n, 1}, std::move(out), {x}, [px, n, c](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += self.grad[i];
  });
}

template <typename T>
Tensor<T> col_sums(const Tensor<T>& x) {
  check_rank2(x, "col_sums");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.values()[i * c + j];
  auto px = x.node();
  return make_op<T>({1, c}, std::move(out), {x}, [px, n, c](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += self.grad[j];
  });
}

template <typename T>
Tensor<T> mul_cols(const Tensor<T>& x, const Tensor<T>& s) {
  check_rank2(x, "mul_cols");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (s.shape() != Shape{n, 1})
    throw DimensionError("mul_cols: scale must be [N x 1], got " + shape_str(s.shape()));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * s.values()[i];
  auto px = x.node();
  auto ps = s.node();
  return make_op<T>(x.shape(), std::move(out), {x, s}, [px, ps, n, c](Node<T>& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += self.grad[i * c + j] * ps->values[i];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * px->values[i * c + j];
        ps->grad[i] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> div_cols(const Tensor<T>& x, const Tensor<T>& s) {
  check_rank2(x, "div_cols");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (s.shape() != Shape{n, 1})
    throw DimensionError("div_cols: divisor must be [N x 1], got " + shape_str(s.shape()));
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] / s.values()[i];
  auto px = x.node();
  auto ps = s.node();
  return make_op<T>(x.shape(), std::move(out), {x, s}, [px, ps, n, c](Node<T>& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += self.grad[i * c + j] / ps->values[i];
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < c; ++j) acc += self.grad[i * c + j] * self.values[i * c + j];
        ps->grad[i] -= acc / ps->values[i];
      }
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  check_rank2(a, "concat_cols");
  check_rank2(b, "concat_cols");
  const std::size_t n = a.shape()[0];
  if (b.shape()[0] != n)
    throw DimensionError("concat_cols: row counts disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t ca = a.shape()[1], cb = b.shape()[1];
  std::vector<T> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * ca, ca, out.data() + i * (ca + cb));
    std::copy_n(b.values().data() + i * cb, cb, out.data() + i * (ca + cb) + ca);
  }
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>({n, ca + cb}, std::move(out), {a, b}, [pa, pb, n, ca, cb](Node<T>& self) {
    const std::size_t c = ca + cb;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) pa->grad[i * ca + j] += self.grad[i * c + j];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) pb->grad[i * cb + j] += self.grad[i * c + ca + j];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ParameterError("concat_rows: empty part list");
  check_rank2(parts[0], "concat_rows");
  const std::size_t c = parts[0].shape()[1];
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_rank2(p, "concat_rows");
    if (p.shape()[1] != c)
      throw DimensionError("concat_rows: column widths disagree, " + std::to_string(c) + " vs " +
                           std::to_string(p.shape()[1]));
    total += p.shape()[0];
  }
  std::vector<T> out;
  out.reserve(total * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<NodePtr<T>> pnodes;
  pnodes.reserve(parts.size());
  for (const auto& p : parts) pnodes.push_back(p.node());
  return make_op<T>({total, c}, std::move(out), parts, [pnodes, c](Node<T>& self) {
    std::size_t offset = 0;
    for (const auto& p : pnodes) {
      const std::size_t count = p->values.size();
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < count; ++i) p->grad[i] += self.grad[offset + i];
      }
      offset += count;
    }
  });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& idx) {
  check_rank2(x, "gather_rows");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) throw ParameterError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    std::copy_n(x.values().data() + idx[i] * c, c, out.data() + i * c);
  }
  auto px = x.node();
  auto indices = idx;
  return make_op<T>({idx.size(), c}, std::move(out), {x}, [px, indices, c](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) px->grad[indices[i] * c + j] += self.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& x, std::size_t times) {
  check_rank2(x, "repeat_rows");
  if (times == 0) throw ParameterError("repeat_rows: times must be positive");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  std::vector<T> out(n * times * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < times; ++r)
      std::copy_n(x.values().data() + i * c, c, out.data() + (i * times + r) * c);
  auto px = x.node();
  return make_op<T>({n * times, c}, std::move(out), {x}, [px, n, times, c](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < times; ++r)
        for (std::size_t j = 0; j < c; ++j) px->grad[i * c + j] += self.grad[(i * times + r) * c + j];
  });
}

template <typename T>
Tensor<T> group_sum_rows(const Tensor<T>& x, std::size_t k) {
  check_rank2(x, "group_sum_rows");
  const std::size_t nk = x.shape()[0], c = x.shape()[1];
  if (k == 0 || nk % k != 0)
    throw DimensionError("group_sum_rows: row count " + std::to_string(nk) +
                         " not divisible by group size " + std::to_string(k));
  const std::size_t n = nk / k;
  std::vector<T> out(n * c, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] += x.values()[(i * k + r) * c + j];
  auto px = x.node();
  return make_op<T>({n, c}, std::move(out), {x}, [px, n, k, c](Node<T>& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < c; ++j) px->grad[(i * k + r) * c + j] += self.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> group_max_rows(const Tensor<T>& x, std::size_t k) {
  check_rank2(x, "group_max_rows");
  const std::size_t nk = x.shape()[0], c = x.shape()[1];
  if (k == 0 || nk % k != 0)
    throw DimensionError("group_max_rows: row count " + std::to_string(nk) +
                         " not divisible by group size " + std::to_string(k));
  const std::size_t n = nk / k;
  std::vector<T> out(n * c);
  std::vector<std::size_t> argmax(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      T best = x.values()[(i * k) * c + j];
      std::size_t arg = i * k;
      for (std::size_t r = 1; r < k; ++r) {
        const T v = x.values()[(i * k + r) * c + j];
        if (v > best) {
          best = v;
          arg = i * k + r;
        }
      }
      out[i * c + j] = best;
      argmax[i * c + j] = arg;
    }
  }
  auto px = x.node();
  return make_op<T>({n, c}, std::move(out), {x},
                    [px, argmax = std::move(argmax), c](Node<T>& self) {
                      if (!px->requires_grad) return;
                      px->ensure_grad();
                      for (std::size_t i = 0; i < self.grad.size(); ++i) {
                        const std::size_t j = i % c;
                        px->grad[argmax[i] * c + j] += self.grad[i];
                      }
                    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  check_rank2(x, "layer_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm: scale/shift size must match feature width " + std::to_string(c));
  std::vector<T> out(n * c);
  std::vector<T> xhat(n * c);
  std::vector<T> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = x.values().data() + i * c;
    T mean = T(0);
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(c);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (row[j] - mean) * is;
      xhat[i * c + j] = xh;
      out[i * c + j] = gamma.values()[j] * xh + beta.values()[j];
    }
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return make_op<T>(x.shape(), std::move(out), {x, gamma, beta},
                    [px, pg, pb, n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
                      if (pg->requires_grad) {
                        pg->ensure_grad();
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < c; ++j)
                            pg->grad[j] += self.grad[i * c + j] * xhat[i * c + j];
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        for (std::size_t i = 0; i < n; ++i)
                          for (std::size_t j = 0; j < c; ++j) pb->grad[j] += self.grad[i * c + j];
                      }
                      if (px->requires_grad) {
                        px->ensure_grad();
                        for (std::size_t i = 0; i < n; ++i) {
                          // h = g * gamma; dx = inv_std * (h - mean(h) - xhat * mean(h*xhat))
                          T mean_h = T(0), mean_hx = T(0);
                          for (std::size_t j = 0; j < c; ++j) {
                            const T h = self.grad[i * c + j] * pg->values[j];
                            mean_h += h;
                            mean_hx += h * xhat[i * c + j];
                          }
                          mean_h /= T(c);
                          mean_hx /= T(c);
                          for (std::size_t j = 0; j < c; ++j) {
                            const T h = self.grad[i * c + j] * pg->values[j];
                            px->grad[i * c + j] +=
                                inv_std[i] * (h - mean_h - xhat[i * c + j] * mean_hx);
                          }
                        }
                      }
                    });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  if (input.rank() != 3) throw DimensionError("conv2d: input must be [C x H x W], got " + shape_str(input.shape()));
  if (kernels.rank() != 4)
    throw DimensionError("conv2d: kernels must be [Cout x Cin x k x k], got " + shape_str(kernels.shape()));
  const std::size_t cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const std::size_t cout = kernels.shape()[0];
  if (kernels.shape()[1] != cin)
    throw DimensionError("conv2d: channel mismatch, input has " + std::to_string(cin) +
                         " channels, kernels expect " + std::to_string(kernels.shape()[1]));
  const std::size_t kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kh != kw || kh % 2 == 0) throw ParameterError("conv2d: kernel must be square with odd size");
  if (bias.numel() != cout)
    throw DimensionError("conv2d: bias size " + std::to_string(bias.numel()) + " != Cout " +
                         std::to_string(cout));
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(kh / 2);

  std::vector<T> out(cout * h * w);
  {
    const T* in = input.values().data();
    const T* ker = kernels.values().data();
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          T acc = bias.values()[o];
          for (std::size_t i = 0; i < cin; ++i) {
            for (std::size_t dy = 0; dy < kh; ++dy) {
              const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - pad;
              if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + dx) - pad;
                if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                acc += in[(i * h + yy) * w + xx] * ker[((o * cin + i) * kh + dy) * kw + dx];
              }
            }
          }
          out[(o * h + y) * w + x] = acc;
        }
      }
    }
  }
  auto pin = input.node();
  auto pker = kernels.node();
  auto pbias = bias.node();
  return make_op<T>({cout, h, w}, std::move(out), {input, kernels, bias},
                    [pin, pker, pbias, cin, cout, h, w, kh, kw, pad](Node<T>& self) {
                      const T* g = self.grad.data();
                      if (pbias->requires_grad) {
                        pbias->ensure_grad();
                        for (std::size_t o = 0; o < cout; ++o) {
                          T acc = T(0);
                          for (std::size_t p = 0; p < h * w; ++p) acc += g[o * h * w + p];
                          pbias->grad[o] += acc;
                        }
                      }
                      const bool need_in = pin->requires_grad;
                      const bool need_ker = pker->requires_grad;
                      if (!need_in && !need_ker) return;
                      if (need_in) pin->ensure_grad();
                      if (need_ker) pker->ensure_grad();
                      for (std::size_t o = 0; o < cout; ++o) {
                        for (std::size_t y = 0; y < h; ++y) {
                          for (std::size_t x = 0; x < w; ++x) {
                            const T gv = g[(o * h + y) * w + x];
                            if (gv == T(0)) continue;
                            for (std::size_t i = 0; i < cin; ++i) {
                              for (std::size_t dy = 0; dy < kh; ++dy) {
                                const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + dy) - pad;
                                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t dx = 0; dx < kw; ++dx) {
                                  const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + dx) - pad;
                                  if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                                  const std::size_t in_off = (i * h + yy) * w + xx;
                                  const std::size_t ker_off = ((o * cin + i) * kh + dy) * kw + dx;
                                  if (need_in) pin->grad[in_off] += gv * pker->values[ker_off];
                                  if (need_ker) pker->grad[ker_off] += gv * pin->values[in_off];
                                }
                              }
                            }
                          }
                        }
                      }
                    });
}

template <typename T>
BevScatter<T> scatter_max_bev(const Tensor<T>& features,
                              const std::vector<std::ptrdiff_t>& cell_of_point,
                              std::size_t grid_h, std::size_t grid_w) {
  check_rank2(features, "scatter_max_bev");
  const std::size_t n = features.shape()[0], c = features.shape()[1];
  if (cell_of_point.size() != n)
    throw DimensionError("scatter_max_bev: cell index count " + std::to_string(cell_of_point.size()) +
                         " != point count " + std::to_string(n));
  const std::size_t cells = grid_h * grid_w;
  constexpr std::ptrdiff_t kEmpty = -1;

  BevScatter<T> result;
  result.occupancy.assign(cells, 0);
  std::vector<T> out(c * cells, T(0));
  std::vector<std::ptrdiff_t> argmax(c * cells, kEmpty);
  for (std::size_t p = 0; p < n; ++p) {
    const std::ptrdiff_t cell = cell_of_point[p];
    if (cell < 0 || cell >= static_cast<std::ptrdiff_t>(cells)) {
      ++result.dropped;
      continue;
    }
    const bool first = result.occupancy[cell] == 0;
    result.occupancy[cell] = 1;
    for (std::size_t j = 0; j < c; ++j) {
      const T v = features.values()[p * c + j];
      const std::size_t off = j * cells + cell;
      if (first || v > out[off]) {
        out[off] = v;
        argmax[off] = static_cast<std::ptrdiff_t>(p);
      }
    }
  }
  auto pf = features.node();
  result.planes = make_op<T>({c, grid_h, grid_w}, std::move(out), {features},
                             [pf, argmax = std::move(argmax), c, cells](Node<T>& self) {
                               if (!pf->requires_grad) return;
                               pf->ensure_grad();
                               for (std::size_t j = 0; j < c; ++j) {
                                 for (std::size_t cell = 0; cell < cells; ++cell) {
                                   const std::ptrdiff_t p = argmax[j * cells + cell];
                                   if (p < 0) continue;
                                   pf->grad[static_cast<std::size_t>(p) * c + j] +=
                                       self.grad[j * cells + cell];
                                 }
                               }
                             });
  return result;
}

// ---- parameters -----------------------------------------------------------

template <typename T>
Tensor<T> xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  auto t = Tensor<T>::from({fan_in, fan_out}, std::move(v));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T lo, T hi, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& [name, t] : params) t.zero_grad();
}

// ---- finite differences ---------------------------------------------------

template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f, ParamList<T>& params,
                                  double step, double tol) {
  if (step <= 0.0) throw ParameterError("finite_diff_check: step must be positive");

  zero_grads(params);
  Tensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw EvalError("finite_diff_check: non-finite objective value");
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, t] : params) {
    t.node()->ensure_grad();
    analytic.push_back(t.grad());
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& tensor = params[pi].second;
    GradCheckEntry entry;
    entry.name = params[pi].first;
    auto& vals = tensor.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      NoGradGuard no_grad;
      const T original = vals[i];
      vals[i] = original + static_cast<T>(step);
      const double f_plus = static_cast<double>(f().item());
      vals[i] = original - static_cast<T>(step);
      const double f_minus = static_cast<double>(f().item());
      vals[i] = original;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw EvalError("finite_diff_check: non-finite objective at perturbation of " + entry.name);
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double exact = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(numeric), std::abs(exact), 1.0});
      const double rel = std::abs(numeric - exact) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
    }
    entry.passed = entry.max_rel_err <= tol;
    report.worst = std::max(report.worst, entry.max_rel_err);
    report.all_passed = report.all_passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---- explicit instantiations ----------------------------------------------

template class Tensor<float>;
template class Tensor<double>;

#define PTRACK_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> elu1(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> softplus(const Tensor<T>&);                                                   \
  template Tensor<T> vlog(const Tensor<T>&);                                                       \
  template Tensor<T> vabs(const Tensor<T>&);                                                       \
  template Tensor<T> square(const Tensor<T>&);                                                     \
  template Tensor<T> sum_all(const Tensor<T>&);                                                    \
  template Tensor<T> row_sums(const Tensor<T>&);                                                   \
  template Tensor<T> col_sums(const Tensor<T>&);                                                   \
  template Tensor<T> mul_cols(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div_cols(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> repeat_rows(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> group_sum_rows(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> group_max_rows(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template BevScatter<T> scatter_max_bev(const Tensor<T>&, const std::vector<std::ptrdiff_t>&,     \
                                         std::size_t, std::size_t);                                \
  template Tensor<T> xavier_uniform(std::size_t, std::size_t, Rng&);                               \
  template Tensor<T> uniform_tensor(Shape, T, T, Rng&);                                            \
  template void zero_grads(ParamList<T>&);                                                         \
  template GradCheckReport finite_diff_check(const std::function<Tensor<T>()>&, ParamList<T>&,     \
                                             double, double);

PTRACK_INSTANTIATE_OPS(float)
PTRACK_INSTANTIATE_OPS(double)

#undef PTRACK_INSTANTIATE_OPS

}  // namespace ptrack

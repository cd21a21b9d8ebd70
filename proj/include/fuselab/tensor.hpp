#pragma once
// Dense row-major tensors with reverse-mode autodiff.
//
// A Tensor<T> is a shared handle to a node holding values, an optional grad
// buffer and, while a graph is alive, the parent links + backward closure that
// produced it. T is float for training and double for gradient verification;
// the whole library is templated over it so the same code runs at both
// precisions. Ops record into the graph only when autograd recording is on
// and at least one input requires grad. backward() accumulates grads on leaf
// tensors (call clear_grad / zero_grad to reset) and releases the graph.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace fuselab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace autograd {

inline bool& recording_flag() {
  thread_local bool on = true;
  return on;
}

inline bool recording() { return recording_flag(); }

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(recording_flag()) { recording_flag() = false; }
  ~NoGradGuard() { recording_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // persists on leaves, transient on intermediates
  bool requires_grad = false;
  std::vector<Tensor<T>> parents;
  std::function<void(TensorNode<T>&)> backprop;
};

template <typename T>
Tensor<T> op_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                    std::function<void(TensorNode<T>&)> backprop);

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  // Checked factories (the public creation surface): shape non-empty, dims >= 1.
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    check_create_shape(shape);
    return filled(std::move(shape), T(0), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    check_create_shape(shape);
    return filled(std::move(shape), T(1), requires_grad);
  }
  static Tensor normal(Shape shape, double mean, double stddev, Rng& rng,
                       bool requires_grad = false) {
    check_create_shape(shape);
    std::vector<T> v(shape_numel(shape));
    for (T& x : v) x = static_cast<T>(rng.next_normal(mean, stddev));
    return wrap(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check_create_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw shape_error("from_values: shape " + shape_str(shape) + " wants " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(values.size()));
    }
    return wrap(std::move(shape), std::move(values), requires_grad);
  }
  static Tensor scalar_value(T v, bool requires_grad = false) {
    return wrap({1}, {v}, requires_grad);
  }

  // Unchecked builder: permits zero-sized dims (empty sequences). Value count
  // must still match the shape.
  static Tensor wrap(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw shape_error("wrap: value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t numel() const { return node_->values.size(); }

  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }

  T value() const {
    if (numel() != 1) {
      throw contract_error("value(): tensor has " + std::to_string(numel()) +
                           " elements, expected 1");
    }
    return node_->values[0];
  }
  T at(std::size_t r, std::size_t c) const {
    return node_->values[r * node_->shape.back() + c];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_ && node_->parents.empty(); }

  // Freezing/unfreezing is a leaf-only operation; intermediates derive their
  // flag from their inputs at record time.
  void set_requires_grad(bool rg) {
    if (!is_leaf()) throw contract_error("set_requires_grad on non-leaf tensor");
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw contract_error("grad(): no gradient populated");
    return node_->grad;
  }
  void clear_grad() { node_->grad.clear(); }

  bool all_finite() const {
    for (T v : node_->values) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  TensorNode<T>* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor filled(Shape shape, T v, bool requires_grad) {
    std::vector<T> vals(shape_numel(shape), v);
    return wrap(std::move(shape), std::move(vals), requires_grad);
  }

  static void check_create_shape(const Shape& shape) {
    if (shape.empty()) throw shape_error("tensor shape must be non-empty");
    for (std::size_t d : shape) {
      if (d < 1) throw shape_error("tensor dims must be >= 1, got " + shape_str(shape));
    }
  }

  std::shared_ptr<TensorNode<T>> node_;

  template <typename U>
  friend Tensor<U> op_result(Shape, std::vector<U>, std::vector<Tensor<U>>,
                             std::function<void(TensorNode<U>&)>);
};

namespace detail {

template <typename T>
inline std::vector<T>& grad_buf(const Tensor<T>& t) {
  TensorNode<T>* n = t.node();
  if (n->grad.empty()) n->grad.assign(n->values.size(), T(0));
  return n->grad;
}

}  // namespace detail

// Builds an op output; records parents + closure only when recording is on and
// some input requires grad.
template <typename T>
Tensor<T> op_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                    std::function<void(TensorNode<T>&)> backprop) {
  if (values.size() != shape_numel(shape)) {
    throw shape_error("op result value count does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (autograd::recording() && rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

// ============================================================================
// Backward engine
// ============================================================================

// Reverse pass from a scalar. Seeds with 1, walks the graph in reverse
// topological order, then frees every recorded node's links/closure/grad so a
// second backward needs a fresh forward. Leaf grads survive and accumulate
// across calls.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw contract_error("backward: expected a defined scalar tensor");
  }

  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> seen;
  struct Frame {
    TensorNode<T>* n;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node(), 0});
  seen.insert(loss.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode<T>* p = f.n->parents[f.next++].node();
      if (p && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  loss.node()->grad.assign(1, T(1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
  for (TensorNode<T>* n : topo) {
    if (n->backprop) {  // recorded intermediate: release graph + transient grad
      n->backprop = nullptr;
      n->parents.clear();
      n->grad.clear();
    }
  }
}

template <typename T>
void zero_grad(const std::vector<Tensor<T>>& params) {
  for (const auto& p : params) p.node()->grad.clear();
}

// ============================================================================
// Elementwise and shape ops
// ============================================================================

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                      " vs " + shape_str(b.shape()));
  }
}

// add supports equal shapes, plus broadcasting a rank-1 [c] bias across the
// rows of a rank-2 [r,c] tensor.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool row_bcast = a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1);
  if (!row_bcast) check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  if (row_bcast) {
    const std::size_t r = a.dim(0), c = a.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.values()[i * c + j] + b.values()[j];
  } else {
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] + b.values()[i];
  }
  return op_result<T>(a.shape(), std::move(out), {a, b}, [a, b, row_bcast](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buf(b);
      if (row_bcast) {
        const std::size_t r = a.dim(0), c = a.dim(1);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += n.grad[i * c + j];
      } else {
        for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] - b.values()[i];
  return op_result<T>(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buf(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] * b.values()[i];
  return op_result<T>(a.shape(), std::move(out), {a, b}, [a, b](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buf(b);
      for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i] += n.grad[i] * a.values()[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a.values()[i] * s;
  return op_result<T>(a.shape(), std::move(out), {a}, [a, s](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i] * s;
    }
  });
}

template <typename T>
inline void check_rank2(const Tensor<T>& a, const char* op) {
  if (a.rank() != 2) {
    throw shape_error(std::string(op) + ": expected rank-2 tensor, got " +
                      shape_str(a.shape()));
  }
}

// [m,k] x [k,n]. The i-k-j loop order accumulates each output element over k
// in ascending order, matching a naive per-element dot product bit for bit.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw shape_error("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  {
    const T* A = a.values().data();
    const T* B = b.values().data();
    T* C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = A[i * k + kk];
        const T* brow = B + kk * n;
        T* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  return op_result<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](TensorNode<T>& node) {
    const T* G = node.grad.data();
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      const T* B = b.values().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          T s = 0;
          const T* grow = G + i * n;
          const T* brow = B + kk * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + kk] += s;
        }
      }
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_buf(b);
      const T* A = a.values().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T av = A[i * k + kk];
          const T* grow = G + i * n;
          T* gbrow = gb.data() + kk * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  check_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.values()[i * c + j];
  return op_result<T>({c, r}, std::move(out), {a}, [a, r, c](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += n.grad[j * r + i];
    }
  });
}

// Stacks rank-2 tensors vertically; all must share a column count. Zero-row
// pieces are legal and contribute nothing.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_rows: empty input list");
  for (const auto& p : parts) check_rank2(p, "concat_rows");
  const std::size_t c = parts[0].dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.dim(1) != c) {
      throw shape_error("concat_rows: column mismatch " + shape_str(p.shape()) +
                        " vs cols=" + std::to_string(c));
    }
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * c);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return op_result<T>({rows, c}, std::move(out), parts, [parts, c](TensorNode<T>& n) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t cnt = p.numel();
      if (p.requires_grad()) {
        auto& gp = detail::grad_buf(p);
        for (std::size_t i = 0; i < cnt; ++i) gp[i] += n.grad[off + i];
      }
      off += cnt;
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  check_rank2(a, "slice_rows");
  if (begin > end || end > a.dim(0)) {
    throw range_error("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t c = a.dim(1);
  std::vector<T> out(a.values().begin() + begin * c, a.values().begin() + end * c);
  return op_result<T>({end - begin, c}, std::move(out), {a}, [a, begin, c](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < n.grad.size(); ++i) ga[begin * c + i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw contract_error("concat_cols: empty input list");
  for (const auto& p : parts) check_rank2(p, "concat_cols");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != r) {
      throw shape_error("concat_cols: row mismatch " + shape_str(p.shape()) +
                        " vs rows=" + std::to_string(r));
    }
    cols += p.dim(1);
  }
  std::vector<T> out(r * cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out[i * cols + off + j] = p.values()[i * pc + j];
    off += pc;
  }
  return op_result<T>({r, cols}, std::move(out), parts, [parts, r, cols](TensorNode<T>& n) {
    std::size_t off2 = 0;
    for (const auto& p : parts) {
      const std::size_t pc = p.dim(1);
      if (p.requires_grad()) {
        auto& gp = detail::grad_buf(p);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp[i * pc + j] += n.grad[i * cols + off2 + j];
      }
      off2 += pc;
    }
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  check_rank2(a, "slice_cols");
  if (begin > end || end > a.dim(1)) {
    throw range_error("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") out of bounds for " + shape_str(a.shape()));
  }
  const std::size_t r = a.dim(0), c = a.dim(1), w = end - begin;
  std::vector<T> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.values()[i * c + begin + j];
  return op_result<T>({r, w}, std::move(out), {a}, [a, begin, r, c, w](TensorNode<T>& n) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_buf(a);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * c + begin + j] += n.grad[i * w + j];
    }
  });
}

// ============================================================================
// Softmax, normalization, activations
// ============================================================================

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw shape_error("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(a.shape()));
  }
  const std::size_t n = a.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const auto idx = [&](std::size_t t) { return (o * n + t) * inner + in; };
      T mx = a.values()[idx(0)];
      for (std::size_t t = 1; t < n; ++t) mx = std::max(mx, a.values()[idx(t)]);
      T sum = 0;
      for (std::size_t t = 0; t < n; ++t) {
        const T e = std::exp(a.values()[idx(t)] - mx);
        out[idx(t)] = e;
        sum += e;
      }
      for (std::size_t t = 0; t < n; ++t) out[idx(t)] /= sum;
    }
  }
  std::vector<T> y = out;  // backward needs the output
  return op_result<T>(a.shape(), std::move(out), {a},
                      [a, y = std::move(y), n, outer, inner](TensorNode<T>& nd) {
                        if (!a.requires_grad()) return;
                        auto& ga = detail::grad_buf(a);
                        for (std::size_t o = 0; o < outer; ++o) {
                          for (std::size_t in = 0; in < inner; ++in) {
                            const auto idx = [&](std::size_t t) { return (o * n + t) * inner + in; };
                            T dot = 0;
                            for (std::size_t t = 0; t < n; ++t) dot += nd.grad[idx(t)] * y[idx(t)];
                            for (std::size_t t = 0; t < n; ++t)
                              ga[idx(t)] += y[idx(t)] * (nd.grad[idx(t)] - dot);
                          }
                        }
                      });
}

// Attention mask over a [rows, cols] score matrix; allowed = 1 means the row
// may attend to that column.
struct BoolMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static BoolMask full(std::size_t r, std::size_t c) {
    return BoolMask{r, c, std::vector<std::uint8_t>(r * c, 1)};
  }
  static BoolMask causal(std::size_t n) {
    BoolMask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
    return m;
  }
  bool at(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

// Softmax across each row restricted to allowed positions; disallowed outputs
// are exactly zero. A fully-masked row has no valid distribution.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, const BoolMask& mask) {
  check_rank2(a, "masked_softmax");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (mask.rows != r || mask.cols != c) {
    throw shape_error("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                      std::to_string(mask.cols) + " vs tensor " + shape_str(a.shape()));
  }
  std::vector<T> out(r * c, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    T mx = 0;
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask.at(i, j)) continue;
      const T v = a.values()[i * c + j];
      mx = any ? std::max(mx, v) : v;
      any = true;
    }
    if (!any) {
      throw contract_error("masked_softmax: row " + std::to_string(i) +
                           " has no allowed positions");
    }
    T sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!mask.at(i, j)) continue;
      const T e = std::exp(a.values()[i * c + j] - mx);
      out[i * c + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) {
      if (mask.at(i, j)) out[i * c + j] /= sum;
    }
  }
  std::vector<T> y = out;
  return op_result<T>({r, c}, std::move(out), {a},
                      [a, y = std::move(y), mask, r, c](TensorNode<T>& nd) {
                        if (!a.requires_grad()) return;
                        auto& ga = detail::grad_buf(a);
                        for (std::size_t i = 0; i < r; ++i) {
                          T dot = 0;
                          for (std::size_t j = 0; j < c; ++j)
                            if (mask.at(i, j)) dot += nd.grad[i * c + j] * y[i * c + j];
                          for (std::size_t j = 0; j < c; ++j)
                            if (mask.at(i, j))
                              ga[i * c + j] += y[i * c + j] * (nd.grad[i * c + j] - dot);
                        }
                      });
}

// Normalizes the last dimension (population variance, eps inside the sqrt),
// then applies a per-feature gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  if (x.rank() < 1) throw shape_error("layer_norm: rank-0 input");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw shape_error("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / std::max<std::size_t>(d, 1);
  std::vector<T> out(x.numel());
  std::vector<T> norm(x.numel());   // (x - mean) * inv_std, pre gain/bias
  std::vector<T> inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* row = x.values().data() + i * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T dv = row[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T y = (row[j] - mean) * inv;
      norm[i * d + j] = y;
      out[i * d + j] = gain.values()[j] * y + bias.values()[j];
    }
  }
  return op_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, norm = std::move(norm), inv_std = std::move(inv_std), rows,
       d](TensorNode<T>& nd) {
        for (std::size_t i = 0; i < rows; ++i) {
          const T* g = nd.grad.data() + i * d;
          const T* y = norm.data() + i * d;
          if (x.requires_grad()) {
            auto& gx = detail::grad_buf(x);
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T gy = g[j] * gain.values()[j];
              m1 += gy;
              m2 += gy * y[j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T gy = g[j] * gain.values()[j];
              gx[i * d + j] += (gy - m1 - y[j] * m2) * inv_std[i];
            }
          }
          if (gain.requires_grad()) {
            auto& gg = detail::grad_buf(gain);
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * y[j];
          }
          if (bias.requires_grad()) {
            auto& gb = detail::grad_buf(bias);
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[j];
          }
        }
      });
}

// tanh-approximation GELU; smooth everywhere, which keeps finite-difference
// gradient checks well behaved.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kB = 0.044715;
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = static_cast<double>(a.values()[i]);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(kC * (x + kB * x * x * x))));
  }
  return op_result<T>(a.shape(), std::move(out), {a}, [a](TensorNode<T>& n) {
    if (!a.requires_grad()) return;
    auto& ga = detail::grad_buf(a);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const double x = static_cast<double>(a.values()[i]);
      const double t = std::tanh(kC * (x + kB * x * x * x));
      const double du = kC * (1.0 + 3.0 * kB * x * x);
      const double dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      ga[i] += n.grad[i] * static_cast<T>(dy);
    }
  });
}

// ============================================================================
// Reductions and losses
// ============================================================================

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.values()) s += v;
  return op_result<T>({1}, {s}, {a}, [a](TensorNode<T>& n) {
    if (!a.requires_grad()) return;
    auto& ga = detail::grad_buf(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw contract_error("mean_all: empty tensor");
  T s = 0;
  for (T v : a.values()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return op_result<T>({1}, {s * inv}, {a}, [a, inv](TensorNode<T>& n) {
    if (!a.requires_grad()) return;
    auto& ga = detail::grad_buf(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[0] * inv;
  });
}

// Gathers rows of a [v,d] table; backward scatter-adds into the table.
template <typename T>
Tensor<T> select_rows(const Tensor<T>& table, const std::vector<int>& ids) {
  check_rank2(table, "select_rows");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw range_error("select_rows: id " + std::to_string(id) + " outside table of " +
                        std::to_string(v) + " rows");
    }
  }
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = table.values().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.begin() + i * d);
  }
  return op_result<T>({ids.size(), d}, std::move(out), {table}, [table, ids, d](TensorNode<T>& n) {
    if (!table.requires_grad()) return;
    auto& gt = detail::grad_buf(table);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      const T* src = n.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

// Mean negative log-likelihood of target ids under row-wise softmax of logits.
template <typename T>
Tensor<T> cross_entropy_with_ids(const Tensor<T>& logits, const std::vector<int>& ids) {
  check_rank2(logits, "cross_entropy_with_ids");
  const std::size_t r = logits.dim(0), v = logits.dim(1);
  if (ids.size() != r) {
    throw shape_error("cross_entropy_with_ids: " + std::to_string(ids.size()) +
                      " targets for " + std::to_string(r) + " logit rows");
  }
  if (r == 0) throw contract_error("cross_entropy_with_ids: no rows");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw range_error("cross_entropy_with_ids: target id " + std::to_string(id) +
                        " outside vocab of " + std::to_string(v));
    }
  }
  std::vector<T> probs(r * v);
  T loss = 0;
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = logits.values().data() + i * v;
    T mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    T sum = 0;
    for (std::size_t j = 0; j < v; ++j) {
      const T e = std::exp(row[j] - mx);
      probs[i * v + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= sum;
    loss += mx + std::log(sum) - row[static_cast<std::size_t>(ids[i])];
  }
  loss /= static_cast<T>(r);
  return op_result<T>({1}, {loss}, {logits},
                      [logits, ids, probs = std::move(probs), r, v](TensorNode<T>& n) {
                        if (!logits.requires_grad()) return;
                        auto& gl = detail::grad_buf(logits);
                        const T g0 = n.grad[0] / static_cast<T>(r);
                        for (std::size_t i = 0; i < r; ++i) {
                          for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g0 * probs[i * v + j];
                          gl[i * v + static_cast<std::size_t>(ids[i])] -= g0;
                        }
                      });
}

// ============================================================================
// Binary tensor file format
// ============================================================================
//
// Layout, little-endian:
//   magic "TNSR" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 rank |
//   u64 dims[rank] | raw values row-major
// Loading widens f32 files into double tensors; narrowing f64 into float is
// rejected.

static_assert(std::endian::native == std::endian::little,
              "tensor files assume a little-endian host");

namespace detail {

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  if (n == 0) return;
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path,
                       std::size_t offset, const char* what) {
  if (n == 0) return;
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw format_error(path + ": truncated reading " + what + " at byte offset " +
                       std::to_string(offset));
  }
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else return 1;
}

}  // namespace detail

template <typename T>
void save_tnsr(const std::string& path, const Tensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw format_error(path + ": cannot open for writing");
  detail::write_bytes(os, "TNSR", 4);
  const std::uint32_t version = 1;
  detail::write_bytes(os, &version, 4);
  const std::uint8_t dtype = detail::dtype_code<T>();
  detail::write_bytes(os, &dtype, 1);
  const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
  detail::write_bytes(os, &rank, 4);
  for (std::size_t i = 0; i < t.rank(); ++i) {
    const std::uint64_t d = t.dim(i);
    detail::write_bytes(os, &d, 8);
  }
  detail::write_bytes(os, t.values().data(), t.numel() * sizeof(T));
  if (!os) throw format_error(path + ": write failed");
}

template <typename T>
Tensor<T> load_tnsr(const std::string& path) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw format_error(path + ": cannot open");
  char magic[4];
  detail::read_bytes(is, magic, 4, path, 0, "magic");
  if (std::memcmp(magic, "TNSR", 4) != 0) {
    throw format_error(path + ": bad magic at byte offset 0");
  }
  std::uint32_t version = 0;
  detail::read_bytes(is, &version, 4, path, 4, "version");
  if (version != 1) {
    throw format_error(path + ": unsupported version " + std::to_string(version) +
                       " at byte offset 4");
  }
  std::uint8_t dtype = 0;
  detail::read_bytes(is, &dtype, 1, path, 8, "dtype");
  if (dtype > 1) {
    throw format_error(path + ": unknown dtype " + std::to_string(dtype) + " at byte offset 8");
  }
  if (dtype == 1 && std::is_same_v<T, float>) {
    throw format_error(path + ": refusing to narrow f64 data into f32 tensor");
  }
  std::uint32_t rank = 0;
  detail::read_bytes(is, &rank, 4, path, 9, "rank");
  if (rank == 0 || rank > 8) {
    throw format_error(path + ": implausible rank " + std::to_string(rank) +
                       " at byte offset 9");
  }
  Shape shape(rank);
  std::size_t offset = 13;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint64_t d = 0;
    detail::read_bytes(is, &d, 8, path, offset, "dims");
    shape[i] = static_cast<std::size_t>(d);
    offset += 8;
  }
  const std::size_t count = shape_numel(shape);
  std::vector<T> vals(count);
  if (dtype == detail::dtype_code<T>()) {
    detail::read_bytes(is, vals.data(), count * sizeof(T), path, offset, "values");
  } else {  // f32 file into f64 tensor
    std::vector<float> raw(count);
    detail::read_bytes(is, raw.data(), count * 4, path, offset, "values");
    for (std::size_t i = 0; i < count; ++i) vals[i] = static_cast<T>(raw[i]);
  }
  return Tensor<T>::wrap(std::move(shape), std::move(vals));
}

// ============================================================================
// Fingerprinting
// ============================================================================

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// Order-sensitive hash over shapes and raw value bytes of a parameter list.
template <typename T>
std::uint64_t fingerprint_tensors(const std::vector<Tensor<T>>& ts) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& t : ts) {
    const std::uint64_t rank = t.rank();
    h = fnv1a64(&rank, 8, h);
    for (std::size_t i = 0; i < t.rank(); ++i) {
      const std::uint64_t d = t.dim(i);
      h = fnv1a64(&d, 8, h);
    }
    h = fnv1a64(t.values().data(), t.numel() * sizeof(T), h);
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// ============================================================================
// Finite-difference gradient verification (double precision)
// ============================================================================

// Runs one recorded forward/backward, then central differences per parameter
// element with the graph disabled. Returns the worst relative error
// |ad - fd| / max(1, |ad|, |fd|). Non-finite values name the offending
// parameter element.
template <typename F>
double grad_check(F&& f, const std::vector<Tensor<double>>& params, double step = 1e-5) {
  for (const auto& p : params) {
    if (!p.requires_grad()) throw contract_error("grad_check: parameter without requires_grad");
    p.node()->grad.clear();
  }
  Tensor<double> loss = f();
  if (!loss.all_finite()) throw numeric_error("grad_check: non-finite loss");
  backward(loss);
  std::vector<std::vector<double>> ad;
  ad.reserve(params.size());
  for (const auto& p : params) {
    ad.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));
  }

  double max_rel = 0.0;
  autograd::NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = const_cast<Tensor<double>&>(params[pi]).values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + step;
      const double up = f().value();
      vals[i] = orig - step;
      const double down = f().value();
      vals[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw numeric_error("grad_check: non-finite loss perturbing parameter " +
                            std::to_string(pi) + " element " + std::to_string(i));
      }
      const double fd = (up - down) / (2.0 * step);
      const double a = ad[pi][i];
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  for (const auto& p : params) p.node()->grad.clear();
  return max_rel;
}

}  // namespace fuselab

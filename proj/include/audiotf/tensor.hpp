#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "audiotf/common.hpp"

namespace audiotf {

// Reverse-mode autodiff over dense row-major tensors. Graphs are taped
// per forward pass (define-by-run); backward() replays the tape in exact
// reverse construction order. One graph per execution context.

inline std::atomic<std::uint64_t>& tensor_id_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(std::move(shape), {}, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    std::int64_t count = numel(shape);
    if (count <= 0) throw DimensionError("tensor shape must have positive extents: " + shape_str(shape));
    if (values.empty()) values.assign(size_t(count), T(0));
    if (std::int64_t(values.size()) != count)
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    n->id = tensor_id_counter()++;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  // Op-result constructor used by every differentiable operation.
  static Tensor make_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn) {
    Tensor t = from(std::move(shape), std::move(values));
    for (const T v : t.node_->values) {
      if (!std::isfinite(double(v))) throw Error("non-finite value produced by forward op");
    }
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.node_->requires_grad;
    if (needs) {
      t.node_->requires_grad = true;
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  std::int64_t size() const { return std::int64_t(node_->values.size()); }
  std::vector<T>& values() { return node_->values; }
  const std::vector<T>& values() const { return node_->values; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  std::shared_ptr<Node> node() const { return node_; }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->values[0];
  }

  void zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Drops the tape reference so the value can outlive the graph.
  Tensor detach() const { return from(node_->shape, node_->values); }

  // Backpropagates from this scalar through the recorded tape.
  // Returns the number of op nodes visited (each exactly once).
  size_t backward() {
    if (size() != 1) throw ContractError("backward() requires a scalar loss, got " + shape_str(shape()));
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{node_.get()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (!n->requires_grad || !seen.insert(n).second) continue;
      order.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    node_->ensure_grad();
    node_->grad[0] += T(1);
    size_t visited = 0;
    for (Node* n : order) {
      if (n->backward_fn) {
        n->backward_fn(*n);
        ++visited;
      }
    }
    for (Node* n : order) {
      for (const T g : n->grad) {
        if (!std::isfinite(double(g))) throw Error("non-finite gradient produced by backward pass");
      }
    }
    return visited;
  }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using CEMap = Eigen::Map<const EMat<T>>;

// True when small is a trailing suffix of big (equal shapes included).
inline bool suffix_broadcastable(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (big[off + i] != small[i]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: 2D @ 2D, 3D @ 2D (right operand shared across the batch), 3D @ 3D
// with equal batch. transpose_b multiplies by the transpose of b's last two
// axes without materializing it.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3)
    throw DimensionError("matmul supports rank 2/3 operands, got " + shape_str(sa) + " @ " + shape_str(sb));
  if (sa.size() == 2 && sb.size() == 3)
    throw DimensionError("matmul: unbatched left with batched right is unsupported");
  const int batch = sa.size() == 3 ? sa[0] : 1;
  if (sb.size() == 3 && (sa.size() != 3 || sb[0] != batch))
    throw DimensionError("matmul batch mismatch: " + shape_str(sa) + " @ " + shape_str(sb));
  const int m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const int bk = transpose_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const int n = transpose_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (k != bk)
    throw DimensionError("matmul inner dimension mismatch: " + shape_str(sa) + " @ " + shape_str(sb) +
                         (transpose_b ? " (transposed)" : ""));
  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(size_t(numel(out_shape)));
  const bool b_batched = sb.size() == 3;
  const std::int64_t a_stride = std::int64_t(m) * k;
  const std::int64_t b_stride = b_batched ? std::int64_t(sb[1]) * sb[2] : 0;
  const std::int64_t y_stride = std::int64_t(m) * n;
  const int brows = sb[sb.size() - 2], bcols = sb[sb.size() - 1];
  for (int i = 0; i < batch; ++i) {
    detail::CEMap<T> A(a.values().data() + i * a_stride, m, k);
    detail::CEMap<T> B(b.values().data() + i * b_stride, brows, bcols);
    detail::EMap<T> Y(out.data() + i * y_stride, m, n);
    if (transpose_b)
      Y.noalias() = A * B.transpose();
    else
      Y.noalias() = A * B;
  }
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [a, b, transpose_b, batch, m, k, n, b_batched, a_stride, b_stride, y_stride, brows,
       bcols](TensorNode<T>& y) {
        auto an = a.node();
        auto bn = b.node();
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (int i = 0; i < batch; ++i) {
          detail::CEMap<T> dY(y.grad.data() + i * y_stride, m, n);
          detail::CEMap<T> A(an->values.data() + i * a_stride, m, k);
          detail::CEMap<T> B(bn->values.data() + i * b_stride, brows, bcols);
          if (an->requires_grad) {
            detail::EMap<T> dA(an->grad.data() + i * a_stride, m, k);
            if (transpose_b)
              dA.noalias() += dY * B;
            else
              dA.noalias() += dY * B.transpose();
          }
          if (bn->requires_grad) {
            detail::EMap<T> dB(bn->grad.data() + i * b_stride, brows, bcols);
            if (transpose_b)
              dB.noalias() += dY.transpose() * A;
            else
              dB.noalias() += A.transpose() * dY;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise add/sub/mul. b may either match a's shape exactly or be a
// trailing-suffix broadcast (bias vectors, shared masks).
enum class EwKind { add, sub, mul };

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwKind kind) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape()))
    throw DimensionError("elementwise shapes not broadcastable: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::int64_t n = a.size(), bn = b.size();
  std::vector<T> out(static_cast<size_t>(n));
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::int64_t i = 0; i < n; ++i) {
    const T x = av[i], y = bv[i % bn];
    out[i] = kind == EwKind::add ? x + y : kind == EwKind::sub ? x - y : x * y;
  }
  return Tensor<T>::make_op(
      a.shape(), std::move(out), {a, b}, [a, b, kind, n, bn](TensorNode<T>& y) {
        auto an = a.node();
        auto bn_ = b.node();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::int64_t i = 0; i < n; ++i) {
            const T g = y.grad[i];
            an->grad[i] += kind == EwKind::mul ? g * bn_->values[i % bn] : g;
          }
        }
        if (bn_->requires_grad) {
          bn_->ensure_grad();
          for (std::int64_t i = 0; i < n; ++i) {
            const T g = y.grad[i];
            const T d = kind == EwKind::add ? g : kind == EwKind::sub ? -g : g * an->values[i];
            bn_->grad[i % bn] += d;
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, EwKind::mul);
}

// y = c * x for a plain constant c.
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v *= c;
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x, c](TensorNode<T>& y) {
    auto xn = x.node();
    xn->ensure_grad();
    for (size_t i = 0; i < y.grad.size(); ++i) xn->grad[i] += c * y.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](TensorNode<T>& y) {
    auto xn = x.node();
    xn->ensure_grad();
    // subgradient at 0 is 0
    for (size_t i = 0; i < y.grad.size(); ++i)
      if (xn->values[i] > T(0)) xn->grad[i] += y.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.values().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const T v = x.values()[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [x](TensorNode<T>& y) {
    auto xn = x.node();
    xn->ensure_grad();
    for (size_t i = 0; i < y.grad.size(); ++i) {
      const T s = y.values[i];
      xn->grad[i] += y.grad[i] * s * (T(1) - s);
    }
  });
}

namespace detail {
inline void axis_strides(const Shape& s, int axis, std::int64_t& outer, std::int64_t& len,
                         std::int64_t& inner) {
  if (axis < 0 || axis >= int(s.size()))
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  inner = 1;
  for (int i = axis + 1; i < int(s.size()); ++i) inner *= s[i];
}
}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  std::int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      T sum = T(0);
      for (std::int64_t l = 0; l < len; ++l) {
        const T e = std::exp(xv[base + l * inner] - mx);
        out[base + l * inner] = e;
        sum += e;
      }
      for (std::int64_t l = 0; l < len; ++l) out[base + l * inner] /= sum;
    }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x}, [x, outer, len, inner](TensorNode<T>& y) {
        auto xn = x.node();
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T dot = T(0);
            for (std::int64_t l = 0; l < len; ++l) {
              const std::int64_t i = base + l * inner;
              dot += y.values[i] * y.grad[i];
            }
            for (std::int64_t l = 0; l < len; ++l) {
              const std::int64_t i = base + l * inner;
              xn->grad[i] += y.values[i] * (y.grad[i] - dot);
            }
          }
      });
}

enum class ReduceKind { mean, sum, max };

template <typename T>
Tensor<T> reduce(const Tensor<T>& x, int axis, ReduceKind kind) {
  std::int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  Shape out_shape;
  for (int i = 0; i < int(x.shape().size()); ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(size_t(outer * inner));
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  if (kind == ReduceKind::max) argmax->resize(size_t(outer * inner));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      if (kind == ReduceKind::max) {
        T best = xv[base];
        std::int64_t bi = 0;
        for (std::int64_t l = 1; l < len; ++l)
          if (xv[base + l * inner] > best) {  // ties keep lowest index
            best = xv[base + l * inner];
            bi = l;
          }
        out[o * inner + in] = best;
        (*argmax)[o * inner + in] = bi;
      } else {
        T acc = T(0);
        for (std::int64_t l = 0; l < len; ++l) acc += xv[base + l * inner];
        out[o * inner + in] = kind == ReduceKind::mean ? acc / T(len) : acc;
      }
    }
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), {x},
      [x, outer, len, inner, kind, argmax](TensorNode<T>& y) {
        auto xn = x.node();
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            const T g = y.grad[o * inner + in];
            if (kind == ReduceKind::max) {
              xn->grad[base + (*argmax)[o * inner + in] * inner] += g;
            } else {
              const T d = kind == ReduceKind::mean ? g / T(len) : g;
              for (std::int64_t l = 0; l < len; ++l) xn->grad[base + l * inner] += d;
            }
          }
      });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis) {
  return reduce(x, axis, ReduceKind::mean);
}
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis) {
  return reduce(x, axis, ReduceKind::sum);
}
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis) {
  return reduce(x, axis, ReduceKind::max);
}

// Sum of every element, as a scalar.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (const T v : x.values()) acc += v;
  return Tensor<T>::make_op({1}, {acc}, {x}, [x](TensorNode<T>& y) {
    auto xn = x.node();
    xn->ensure_grad();
    const T g = y.grad[0];
    for (T& d : xn->grad) d += g;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
  std::vector<T> out(x.values().begin(), x.values().end());
  return Tensor<T>::make_op(std::move(new_shape), std::move(out), {x}, [x](TensorNode<T>& y) {
    auto xn = x.node();
    xn->ensure_grad();
    for (size_t i = 0; i < y.grad.size(); ++i) xn->grad[i] += y.grad[i];
  });
}

// Half-open [start, stop) along one axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int stop) {
  std::int64_t outer, len, inner;
  detail::axis_strides(x.shape(), axis, outer, len, inner);
  if (start < 0 || stop > len || start >= stop)
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") out of bounds for axis extent " + std::to_string(len));
  Shape out_shape = x.shape();
  out_shape[axis] = stop - start;
  const std::int64_t olen = stop - start;
  std::vector<T> out(size_t(outer * olen * inner));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t l = 0; l < olen; ++l)
      std::copy_n(&xv[(o * len + start + l) * inner], inner, &out[(o * olen + l) * inner]);
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), {x},
      [x, outer, len, inner, start, olen](TensorNode<T>& y) {
        auto xn = x.node();
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t l = 0; l < olen; ++l) {
            const T* src = &y.grad[(o * olen + l) * inner];
            T* dst = &xn->grad[(o * len + start + l) * inner];
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
          }
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape out_shape = parts[0].shape();
  if (axis < 0 || axis >= int(out_shape.size()))
    throw DimensionError("concat axis " + std::to_string(axis) + " invalid for " + shape_str(out_shape));
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (int(p.shape().size()) != int(out_shape.size()))
      throw DimensionError("concat rank mismatch");
    for (int i = 0; i < int(out_shape.size()); ++i)
      if (i != axis && p.shape()[i] != out_shape[i])
        throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                             shape_str(out_shape));
    total += p.shape()[axis];
  }
  out_shape[axis] = int(total);
  std::int64_t outer, len, inner;
  detail::axis_strides(out_shape, axis, outer, len, inner);
  std::vector<T> out(size_t(numel(out_shape)));
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t plen = p.shape()[axis];
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(&pv[o * plen * inner], plen * inner, &out[(o * len + off) * inner]);
    off += plen;
  }
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), parts,
      [parts, axis, outer, len, inner](TensorNode<T>& y) {
        std::int64_t off = 0;
        for (const auto& p : parts) {
          auto pn = p.node();
          const std::int64_t plen = p.shape()[axis];
          if (pn->requires_grad) {
            pn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
              const T* src = &y.grad[(o * len + off) * inner];
              T* dst = &pn->grad[o * plen * inner];
              for (std::int64_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
            }
          }
          off += plen;
        }
      });
}

}  // namespace audiotf

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "s4d/rng.hpp"

// Reverse-mode autodiff over dense row-major tensors. A Graph owns node
// storage (value, grad, backward closure); Tensor is a cheap handle into it.
// Node creation order is topological by construction, so backward() is a
// single reverse sweep. Values are immutable once a node is created.
//
// Everything is templated on the scalar so the same code runs in float for
// training and in double for finite-difference gradient checking.

namespace s4d {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename S>
inline constexpr S neg_inf = -std::numeric_limits<S>::infinity();

template <typename S>
class Graph;

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  bool defined() const { return g_ != nullptr; }
  Graph<S>* graph() const { return g_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int rank() const { return (int)shape().size(); }
  int dim(int i) const { return shape().at(i); }
  int64_t size() const { return numel(shape()); }
  bool requires_grad() const;

  std::span<const S> data() const;
  std::span<const S> grad() const;

  S item() const {
    auto d = data();
    if (d.size() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return d[0];
  }

 private:
  friend class Graph<S>;
  Tensor(Graph<S>* g, int id) : g_(g), id_(id) {}
  Graph<S>* g_ = nullptr;
  int id_ = -1;
};

template <typename S>
class Graph {
 public:
  Tensor<S> leaf(Shape shape, std::vector<S> value, bool requires_grad = false) {
    if ((int64_t)value.size() != numel(shape))
      throw std::invalid_argument("leaf: value size does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.grad.assign(n.value.size(), S(0));
    nodes_.push_back(std::move(n));
    return Tensor<S>(this, (int)nodes_.size() - 1);
  }

  Tensor<S> constant(Shape shape, std::vector<S> value) {
    return leaf(std::move(shape), std::move(value), false);
  }

  Tensor<S> full(Shape shape, S v, bool requires_grad = false) {
    std::vector<S> d((size_t)numel(shape), v);
    return leaf(std::move(shape), std::move(d), requires_grad);
  }

  // Records a computed node. requires_grad is inherited from the inputs; the
  // backward closure (set afterwards via set_backward) runs only in that case.
  Tensor<S> make(Shape shape, std::vector<S> value, std::initializer_list<Tensor<S>> inputs) {
    bool rg = false;
    for (const Tensor<S>& t : inputs) {
      if (t.graph() != this) throw std::invalid_argument("make: input from another graph");
      rg = rg || t.requires_grad();
    }
    return make_node(std::move(shape), std::move(value), rg);
  }

  Tensor<S> make(Shape shape, std::vector<S> value, const std::vector<Tensor<S>>& inputs) {
    bool rg = false;
    for (const Tensor<S>& t : inputs) {
      if (t.graph() != this) throw std::invalid_argument("make: input from another graph");
      rg = rg || t.requires_grad();
    }
    return make_node(std::move(shape), std::move(value), rg);
  }

  void set_backward(int id, std::function<void(Graph&)> fn) {
    if (nodes_[id].requires_grad) nodes_[id].backward = std::move(fn);
  }

  // Seeds d(loss)/d(loss)=1 and sweeps the tape once in reverse creation
  // order. Gradients accumulate, so leaves reused by several branches sum.
  void backward(const Tensor<S>& loss) {
    if (loss.graph() != this) throw std::invalid_argument("backward: loss from another graph");
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss.requires_grad())
      throw std::invalid_argument("backward: loss does not depend on any trainable leaf");
    nodes_[loss.id()].grad[0] += S(1);
    for (int id = loss.id(); id >= 0; --id) {
      if (nodes_[id].backward) nodes_[id].backward(*this);
    }
  }

  int size() const { return (int)nodes_.size(); }
  const Shape& shape(int id) const { return nodes_[id].shape; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  std::span<const S> value(int id) const { return nodes_[id].value; }
  std::span<const S> grad(int id) const { return nodes_[id].grad; }
  std::span<S> grad_mut(int id) { return nodes_[id].grad; }

 private:
  Tensor<S> make_node(Shape shape, std::vector<S> value, bool rg) {
    if ((int64_t)value.size() != numel(shape))
      throw std::invalid_argument("make: value size does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.grad.assign(n.value.size(), S(0));
    nodes_.push_back(std::move(n));
    return Tensor<S>(this, (int)nodes_.size() - 1);
  }

  struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    std::function<void(Graph&)> backward;
  };
  std::vector<Node> nodes_;
};

template <typename S>
const Shape& Tensor<S>::shape() const { return g_->shape(id_); }
template <typename S>
bool Tensor<S>::requires_grad() const { return g_->requires_grad(id_); }
template <typename S>
std::span<const S> Tensor<S>::data() const { return g_->value(id_); }
template <typename S>
std::span<const S> Tensor<S>::grad() const { return g_->grad(id_); }

// ==================== kernels ====================

namespace detail {

template <typename S>
using ArrMap = Eigen::Map<Eigen::Array<S, 1, Eigen::Dynamic>>;
template <typename S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>>;

// C[m,n] += A[m,k] * B[k,n], accumulating over k in index order per output
// element. Each output row depends only on the matching input row, so results
// for a row are identical whether it is evaluated inside the full matrix or a
// gathered subset. Sparse expert dispatch relies on that.
template <typename S>
void gemm_accum(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* arow = a + (int64_t)i * k;
    S* crow = c + (int64_t)i * n;
    ArrMap<S> cm(crow, n);
    for (int p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      cm += av * ConstArrMap<S>(b + (int64_t)p * n, n);
    }
  }
}

template <typename S>
std::vector<S> transposed(std::span<const S> x, int rows, int cols) {
  std::vector<S> t((size_t)rows * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) t[(int64_t)j * rows + i] = x[(int64_t)i * cols + j];
  return t;
}

template <typename S>
void check_same_graph(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.defined() || !b.defined() || a.graph() != b.graph())
    throw std::invalid_argument(std::string(op) + ": tensors from different graphs");
}

template <typename S>
void check_rank2(const Tensor<S>& a, const char* op) {
  if (a.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

// Rows of a rank-1 tensor are the tensor itself viewed as [1,n].
template <typename S>
std::pair<int, int> as_rows(const Tensor<S>& x, const char* op) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw std::invalid_argument(std::string(op) + ": expected rank 1 or 2, got " + shape_str(x.shape()));
}

}  // namespace detail

// ==================== elementwise / linear ops ====================

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_graph(a, b, "add");
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Graph<S>& g = *a.graph();
  std::vector<S> v(a.data().begin(), a.data().end());
  detail::ArrMap<S>(v.data(), v.size()) += detail::ConstArrMap<S>(b.data().data(), v.size());
  Tensor<S> out = g.make(a.shape(), std::move(v), {a, b});
  g.set_backward(out.id(), [ia = a.id(), ib = b.id(), io = out.id()](Graph<S>& g) {
    auto go = g.grad(io);
    for (int id : {ia, ib}) {
      if (!g.requires_grad(id)) continue;
      auto gi = g.grad_mut(id);
      detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(go.data(), go.size());
    }
  });
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_graph(a, b, "sub");
  if (a.shape() != b.shape())
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Graph<S>& g = *a.graph();
  std::vector<S> v(a.data().begin(), a.data().end());
  detail::ArrMap<S>(v.data(), v.size()) -= detail::ConstArrMap<S>(b.data().data(), v.size());
  Tensor<S> out = g.make(a.shape(), std::move(v), {a, b});
  g.set_backward(out.id(), [ia = a.id(), ib = b.id(), io = out.id()](Graph<S>& g) {
    auto go = g.grad(io);
    if (g.requires_grad(ia)) {
      auto gi = g.grad_mut(ia);
      detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(go.data(), go.size());
    }
    if (g.requires_grad(ib)) {
      auto gi = g.grad_mut(ib);
      detail::ArrMap<S>(gi.data(), gi.size()) -= detail::ConstArrMap<S>(go.data(), go.size());
    }
  });
  return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_graph(a, b, "mul");
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Graph<S>& g = *a.graph();
  std::vector<S> v(a.size());
  detail::ArrMap<S>(v.data(), v.size()) =
      detail::ConstArrMap<S>(a.data().data(), v.size()) * detail::ConstArrMap<S>(b.data().data(), v.size());
  Tensor<S> out = g.make(a.shape(), std::move(v), {a, b});
  g.set_backward(out.id(), [ia = a.id(), ib = b.id(), io = out.id()](Graph<S>& g) {
    auto go = g.grad(io);
    if (g.requires_grad(ia)) {
      auto gi = g.grad_mut(ia);
      auto vb = g.value(ib);
      detail::ArrMap<S>(gi.data(), gi.size()) +=
          detail::ConstArrMap<S>(go.data(), go.size()) * detail::ConstArrMap<S>(vb.data(), vb.size());
    }
    if (g.requires_grad(ib)) {
      auto gi = g.grad_mut(ib);
      auto va = g.value(ia);
      detail::ArrMap<S>(gi.data(), gi.size()) +=
          detail::ConstArrMap<S>(go.data(), go.size()) * detail::ConstArrMap<S>(va.data(), va.size());
    }
  });
  return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Graph<S>& g = *a.graph();
  std::vector<S> v(a.size());
  detail::ArrMap<S>(v.data(), v.size()) = detail::ConstArrMap<S>(a.data().data(), v.size()) * c;
  Tensor<S> out = g.make(a.shape(), std::move(v), {a});
  g.set_backward(out.id(), [ia = a.id(), io = out.id(), c](Graph<S>& g) {
    if (!g.requires_grad(ia)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ia);
    detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(go.data(), go.size()) * c;
  });
  return out;
}

// x[m,n] + v[n] broadcast over rows.
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& v) {
  detail::check_same_graph(x, v, "add_rowvec");
  auto [m, n] = detail::as_rows(x, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != n)
    throw std::invalid_argument("add_rowvec: vector shape " + shape_str(v.shape()) + " does not match " + shape_str(x.shape()));
  Graph<S>& g = *x.graph();
  std::vector<S> out_v(x.data().begin(), x.data().end());
  for (int i = 0; i < m; ++i)
    detail::ArrMap<S>(out_v.data() + (int64_t)i * n, n) += detail::ConstArrMap<S>(v.data().data(), n);
  Tensor<S> out = g.make(x.shape(), std::move(out_v), {x, v});
  g.set_backward(out.id(), [ix = x.id(), iv = v.id(), io = out.id(), m = m, n = n](Graph<S>& g) {
    auto go = g.grad(io);
    if (g.requires_grad(ix)) {
      auto gi = g.grad_mut(ix);
      detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(go.data(), go.size());
    }
    if (g.requires_grad(iv)) {
      auto gi = g.grad_mut(iv);
      for (int i = 0; i < m; ++i)
        detail::ArrMap<S>(gi.data(), n) += detail::ConstArrMap<S>(go.data() + (int64_t)i * n, n);
    }
  });
  return out;
}

// x[m,n] with row i scaled by s[i].
template <typename S>
Tensor<S> scale_rows(const Tensor<S>& x, const Tensor<S>& s) {
  detail::check_same_graph(x, s, "scale_rows");
  detail::check_rank2(x, "scale_rows");
  const int m = x.dim(0), n = x.dim(1);
  if (s.rank() != 1 || s.dim(0) != m)
    throw std::invalid_argument("scale_rows: scale shape " + shape_str(s.shape()) + " does not match " + shape_str(x.shape()));
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)m * n);
  for (int i = 0; i < m; ++i)
    detail::ArrMap<S>(v.data() + (int64_t)i * n, n) =
        detail::ConstArrMap<S>(x.data().data() + (int64_t)i * n, n) * s.data()[i];
  Tensor<S> out = g.make(x.shape(), std::move(v), {x, s});
  g.set_backward(out.id(), [ix = x.id(), is = s.id(), io = out.id(), m, n](Graph<S>& g) {
    auto go = g.grad(io);
    if (g.requires_grad(ix)) {
      auto gi = g.grad_mut(ix);
      auto sv = g.value(is);
      for (int i = 0; i < m; ++i)
        detail::ArrMap<S>(gi.data() + (int64_t)i * n, n) +=
            detail::ConstArrMap<S>(go.data() + (int64_t)i * n, n) * sv[i];
    }
    if (g.requires_grad(is)) {
      auto gi = g.grad_mut(is);
      auto xv = g.value(ix);
      for (int i = 0; i < m; ++i)
        gi[i] += (detail::ConstArrMap<S>(go.data() + (int64_t)i * n, n) *
                  detail::ConstArrMap<S>(xv.data() + (int64_t)i * n, n))
                     .sum();
    }
  });
  return out;
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_graph(a, b, "matmul");
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Graph<S>& g = *a.graph();
  std::vector<S> v((size_t)m * n, S(0));
  detail::gemm_accum(a.data().data(), b.data().data(), v.data(), m, k, n);
  Tensor<S> out = g.make({m, n}, std::move(v), {a, b});
  g.set_backward(out.id(), [ia = a.id(), ib = b.id(), io = out.id(), m, k, n](Graph<S>& g) {
    auto go = g.grad(io);
    if (g.requires_grad(ia)) {
      auto bt = detail::transposed(g.value(ib), k, n);  // [n,k]
      detail::gemm_accum(go.data(), bt.data(), g.grad_mut(ia).data(), m, n, k);
    }
    if (g.requires_grad(ib)) {
      auto at = detail::transposed(g.value(ia), m, k);  // [k,m]
      detail::gemm_accum(at.data(), go.data(), g.grad_mut(ib).data(), k, m, n);
    }
  });
  return out;
}

// ==================== shape ops ====================

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw std::invalid_argument("reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Graph<S>& g = *x.graph();
  std::vector<S> v(x.data().begin(), x.data().end());
  Tensor<S> out = g.make(std::move(shape), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id()](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(go.data(), go.size());
  });
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  detail::check_rank2(x, "transpose");
  const int m = x.dim(0), n = x.dim(1);
  Graph<S>& g = *x.graph();
  Tensor<S> out = g.make({n, m}, detail::transposed(x.data(), m, n), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), m, n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto gt = detail::transposed(g.grad(io), n, m);
    auto gi = g.grad_mut(ix);
    detail::ArrMap<S>(gi.data(), gi.size()) += detail::ConstArrMap<S>(gt.data(), gt.size());
  });
  return out;
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Graph<S>& g = *xs[0].graph();
  for (const auto& x : xs) {
    detail::check_same_graph(xs[0], x, "concat");
    detail::check_rank2(x, "concat");
  }
  int m0 = xs[0].dim(0), n0 = xs[0].dim(1);
  int total = 0;
  for (const auto& x : xs) {
    if (axis == 0 && x.dim(1) != n0)
      throw std::invalid_argument("concat: column counts differ");
    if (axis == 1 && x.dim(0) != m0)
      throw std::invalid_argument("concat: row counts differ");
    total += x.dim(axis);
  }
  Shape osh = axis == 0 ? Shape{total, n0} : Shape{m0, total};
  std::vector<S> v((size_t)numel(osh));
  std::vector<int> ids, offs, extents;
  int off = 0;
  for (const auto& x : xs) {
    ids.push_back(x.id());
    offs.push_back(off);
    extents.push_back(x.dim(axis));
    const int xm = x.dim(0), xn = x.dim(1);
    if (axis == 0) {
      std::copy(x.data().begin(), x.data().end(), v.begin() + (int64_t)off * n0);
    } else {
      for (int i = 0; i < xm; ++i)
        std::copy_n(x.data().data() + (int64_t)i * xn, xn, v.data() + (int64_t)i * total + off);
    }
    off += x.dim(axis);
  }
  Tensor<S> out = g.make(osh, std::move(v), xs);
  g.set_backward(out.id(), [ids = std::move(ids), offs = std::move(offs), extents = std::move(extents),
                            io = out.id(), axis, m0, n0, total](Graph<S>& g) {
    auto go = g.grad(io);
    for (size_t p = 0; p < ids.size(); ++p) {
      if (!g.requires_grad(ids[p])) continue;
      auto gi = g.grad_mut(ids[p]);
      if (axis == 0) {
        detail::ArrMap<S>(gi.data(), gi.size()) +=
            detail::ConstArrMap<S>(go.data() + (int64_t)offs[p] * n0, gi.size());
      } else {
        for (int i = 0; i < m0; ++i)
          detail::ArrMap<S>(gi.data() + (int64_t)i * extents[p], extents[p]) +=
              detail::ConstArrMap<S>(go.data() + (int64_t)i * total + offs[p], extents[p]);
      }
    }
  });
  return out;
}

// ==================== reductions ====================

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  Graph<S>& g = *x.graph();
  S acc = detail::ConstArrMap<S>(x.data().data(), x.size()).sum();
  Tensor<S> out = g.make({1}, {acc}, {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id()](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    const S go = g.grad(io)[0];
    auto gi = g.grad_mut(ix);
    detail::ArrMap<S>(gi.data(), gi.size()) += go;
  });
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& x) {
  Graph<S>& g = *x.graph();
  const S inv = S(1) / S(x.size());
  S acc = detail::ConstArrMap<S>(x.data().data(), x.size()).sum() * inv;
  Tensor<S> out = g.make({1}, {acc}, {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), inv](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    const S go = g.grad(io)[0] * inv;
    auto gi = g.grad_mut(ix);
    detail::ArrMap<S>(gi.data(), gi.size()) += go;
  });
  return out;
}

// Column means: [m,n] -> [n]. Token mean-pooling.
template <typename S>
Tensor<S> mean_axis0(const Tensor<S>& x) {
  detail::check_rank2(x, "mean_axis0");
  const int m = x.dim(0), n = x.dim(1);
  if (m == 0) throw std::invalid_argument("mean_axis0: empty tensor");
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)n, S(0));
  for (int i = 0; i < m; ++i)
    detail::ArrMap<S>(v.data(), n) += detail::ConstArrMap<S>(x.data().data() + (int64_t)i * n, n);
  const S inv = S(1) / S(m);
  detail::ArrMap<S>(v.data(), n) *= inv;
  Tensor<S> out = g.make({n}, std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), m, n, inv](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (int i = 0; i < m; ++i)
      detail::ArrMap<S>(gi.data() + (int64_t)i * n, n) += detail::ConstArrMap<S>(go.data(), n) * inv;
  });
  return out;
}

// ==================== indexed ops ====================

// Row gather: y[i,:] = x[rows[i],:]. Duplicate indices accumulate on backward,
// which is exactly embedding-lookup semantics.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::vector<int> rows) {
  detail::check_rank2(x, "gather_rows");
  const int m = x.dim(0), n = x.dim(1);
  for (int r : rows)
    if (r < 0 || r >= m) throw std::out_of_range("gather_rows: row index out of range");
  Graph<S>& g = *x.graph();
  const int k = (int)rows.size();
  std::vector<S> v((size_t)k * n);
  for (int i = 0; i < k; ++i)
    std::copy_n(x.data().data() + (int64_t)rows[i] * n, n, v.data() + (int64_t)i * n);
  Tensor<S> out = g.make({k, n}, std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), rows = std::move(rows), n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (size_t i = 0; i < rows.size(); ++i)
      detail::ArrMap<S>(gi.data() + (int64_t)rows[i] * n, n) +=
          detail::ConstArrMap<S>(go.data() + (int64_t)i * n, n);
  });
  return out;
}

// Row scatter into a zero matrix of out_rows rows: y[rows[i],:] += x[i,:].
template <typename S>
Tensor<S> scatter_rows(const Tensor<S>& x, std::vector<int> rows, int out_rows) {
  detail::check_rank2(x, "scatter_rows");
  const int k = x.dim(0), n = x.dim(1);
  if ((int)rows.size() != k) throw std::invalid_argument("scatter_rows: index count does not match rows");
  for (int r : rows)
    if (r < 0 || r >= out_rows) throw std::out_of_range("scatter_rows: row index out of range");
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)out_rows * n, S(0));
  for (int i = 0; i < k; ++i)
    detail::ArrMap<S>(v.data() + (int64_t)rows[i] * n, n) +=
        detail::ConstArrMap<S>(x.data().data() + (int64_t)i * n, n);
  Tensor<S> out = g.make({out_rows, n}, std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), rows = std::move(rows), n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (size_t i = 0; i < rows.size(); ++i)
      detail::ArrMap<S>(gi.data() + (int64_t)i * n, n) +=
          detail::ConstArrMap<S>(go.data() + (int64_t)rows[i] * n, n);
  });
  return out;
}

// Flat-index element gather: y[i] = x.data[idx[i]].
template <typename S>
Tensor<S> take(const Tensor<S>& x, std::vector<int64_t> idx) {
  for (int64_t i : idx)
    if (i < 0 || i >= x.size()) throw std::out_of_range("take: flat index out of range");
  Graph<S>& g = *x.graph();
  std::vector<S> v(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) v[i] = x.data()[idx[i]];
  Tensor<S> out = g.make({(int)idx.size()}, std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), idx = std::move(idx)](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += go[i];
  });
  return out;
}

// Slice along axis of a rank-2 tensor.
template <typename S>
Tensor<S> slice(const Tensor<S>& x, int axis, int start, int len) {
  detail::check_rank2(x, "slice");
  if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  const int m = x.dim(0), n = x.dim(1);
  const int extent = axis == 0 ? m : n;
  if (start < 0 || len <= 0 || start + len > extent)
    throw std::out_of_range("slice: range out of bounds");
  Graph<S>& g = *x.graph();
  Shape osh = axis == 0 ? Shape{len, n} : Shape{m, len};
  std::vector<S> v((size_t)numel(osh));
  if (axis == 0) {
    std::copy_n(x.data().data() + (int64_t)start * n, (int64_t)len * n, v.data());
  } else {
    for (int i = 0; i < m; ++i)
      std::copy_n(x.data().data() + (int64_t)i * n + start, len, v.data() + (int64_t)i * len);
  }
  Tensor<S> out = g.make(std::move(osh), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), axis, start, len, m, n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    if (axis == 0) {
      detail::ArrMap<S>(gi.data() + (int64_t)start * n, (int64_t)len * n) +=
          detail::ConstArrMap<S>(go.data(), (int64_t)len * n);
    } else {
      for (int i = 0; i < m; ++i)
        detail::ArrMap<S>(gi.data() + (int64_t)i * n + start, len) +=
            detail::ConstArrMap<S>(go.data() + (int64_t)i * len, len);
    }
  });
  return out;
}

template <typename S>
Tensor<S> slice_cols(const Tensor<S>& x, int start, int len) { return slice(x, 1, start, len); }
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, int start, int len) { return slice(x, 0, start, len); }

// ==================== nonlinear ops ====================

// Row softmax. Entries may be finite or -inf; -inf maps to an exact zero
// weight. A row of only -inf has no distribution to normalize and is an error.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis = -1) {
  if (x.rank() == 1) {
    Tensor<S> r = softmax(reshape(x, {1, x.dim(0)}), 1);
    return reshape(r, x.shape());
  }
  detail::check_rank2(x, "softmax");
  if (axis == -1) axis = 1;
  if (axis == 0) return transpose(softmax(transpose(x), 1));
  if (axis != 1) throw std::invalid_argument("softmax: axis out of range");
  const int m = x.dim(0), n = x.dim(1);
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)m * n);
  for (int i = 0; i < m; ++i) {
    const S* row = x.data().data() + (int64_t)i * n;
    S mx = neg_inf<S>;
    for (int j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (mx == neg_inf<S>)
      throw std::domain_error("softmax: all entries are -inf along the reduction axis");
    S* orow = v.data() + (int64_t)i * n;
    S denom = S(0);
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);  // exp(-inf) == 0 exactly
      denom += orow[j];
    }
    const S inv = S(1) / denom;
    for (int j = 0; j < n; ++j) orow[j] *= inv;
  }
  Tensor<S> out = g.make(x.shape(), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), m, n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto y = g.value(io);
    auto gi = g.grad_mut(ix);
    for (int i = 0; i < m; ++i) {
      const S* yr = y.data() + (int64_t)i * n;
      const S* gr = go.data() + (int64_t)i * n;
      S dot = S(0);
      for (int j = 0; j < n; ++j) dot += yr[j] * gr[j];
      S* gx = gi.data() + (int64_t)i * n;
      for (int j = 0; j < n; ++j) gx[j] += yr[j] * (gr[j] - dot);
    }
  });
  return out;
}

// Layer normalization over the last axis with affine gain/bias, eps = 1e-6.
template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
  detail::check_same_graph(x, gain, "layernorm");
  detail::check_same_graph(x, bias, "layernorm");
  auto [m, d] = detail::as_rows(x, "layernorm");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw std::invalid_argument("layernorm: gain/bias must be rank-1 of width " + std::to_string(d));
  constexpr S eps = S(1e-6);
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)m * d);
  for (int i = 0; i < m; ++i) {
    const S* row = x.data().data() + (int64_t)i * d;
    S mu = S(0);
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= S(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= S(d);
    const S inv = S(1) / std::sqrt(var + eps);
    S* orow = v.data() + (int64_t)i * d;
    for (int j = 0; j < d; ++j)
      orow[j] = (row[j] - mu) * inv * gain.data()[j] + bias.data()[j];
  }
  Tensor<S> out = g.make(x.shape(), std::move(v), {x, gain, bias});
  g.set_backward(out.id(), [ix = x.id(), ig = gain.id(), ib = bias.id(), io = out.id(), m = m, d = d](Graph<S>& g) {
    auto go = g.grad(io);
    auto xv = g.value(ix);
    auto gv = g.value(ig);
    for (int i = 0; i < m; ++i) {
      const S* row = xv.data() + (int64_t)i * d;
      const S* gr = go.data() + (int64_t)i * d;
      S mu = S(0);
      for (int j = 0; j < d; ++j) mu += row[j];
      mu /= S(d);
      S var = S(0);
      for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= S(d);
      const S inv = S(1) / std::sqrt(var + S(1e-6));
      // dxhat, and its row means needed for the input gradient
      S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
      for (int j = 0; j < d; ++j) {
        const S xhat = (row[j] - mu) * inv;
        const S dxh = gr[j] * gv[j];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xhat;
      }
      mean_dxhat /= S(d);
      mean_dxhat_xhat /= S(d);
      if (g.requires_grad(ix)) {
        auto gi = g.grad_mut(ix);
        S* gx = gi.data() + (int64_t)i * d;
        for (int j = 0; j < d; ++j) {
          const S xhat = (row[j] - mu) * inv;
          const S dxh = gr[j] * gv[j];
          gx[j] += inv * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
        }
      }
      if (g.requires_grad(ig)) {
        auto gi = g.grad_mut(ig);
        for (int j = 0; j < d; ++j) gi[j] += gr[j] * (row[j] - mu) * inv;
      }
      if (g.requires_grad(ib)) {
        auto gi = g.grad_mut(ib);
        for (int j = 0; j < d; ++j) gi[j] += gr[j];
      }
    }
  });
  return out;
}

// Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  Graph<S>& g = *x.graph();
  std::vector<S> v(x.size());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  for (int64_t i = 0; i < x.size(); ++i) {
    const S xv = x.data()[i];
    v[i] = xv * S(0.5) * (S(1) + std::erf(xv * inv_sqrt2));
  }
  Tensor<S> out = g.make(x.shape(), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id()](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto xv = g.value(ix);
    auto gi = g.grad_mut(ix);
    const S inv_sqrt2 = S(1) / std::sqrt(S(2));
    const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
    for (size_t i = 0; i < gi.size(); ++i) {
      const S x0 = xv[i];
      const S cdf = S(0.5) * (S(1) + std::erf(x0 * inv_sqrt2));
      const S pdf = std::exp(S(-0.5) * x0 * x0) * inv_sqrt2pi;
      gi[i] += go[i] * (cdf + x0 * pdf);
    }
  });
  return out;
}

// Inverted dropout; identity (and no tape record) outside train mode.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng, bool train_mode) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!train_mode || p == 0.0) return x;
  Graph<S>& g = *x.graph();
  std::vector<S> mask(x.size());
  const S keep_scale = S(1) / S(1 - p);
  for (auto& mv : mask) mv = rng.uniform() < p ? S(0) : keep_scale;
  std::vector<S> v(x.size());
  for (int64_t i = 0; i < x.size(); ++i) v[i] = x.data()[i] * mask[i];
  Tensor<S> out = g.make(x.shape(), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), mask = std::move(mask)](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (size_t i = 0; i < gi.size(); ++i) gi[i] += go[i] * mask[i];
  });
  return out;
}

// Mean cross-entropy from raw logits. Optional uniform label smoothing.
template <typename S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits, std::vector<int> labels, double smoothing = 0.0) {
  detail::check_rank2(logits, "cross_entropy_logits");
  const int b = logits.dim(0), c = logits.dim(1);
  if ((int)labels.size() != b)
    throw std::invalid_argument("cross_entropy_logits: label count does not match batch");
  for (int y : labels)
    if (y < 0 || y >= c) throw std::out_of_range("cross_entropy_logits: label out of range");
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw std::invalid_argument("cross_entropy_logits: smoothing must be in [0,1)");
  Graph<S>& g = *logits.graph();
  const S s = S(smoothing);
  S total = S(0);
  for (int i = 0; i < b; ++i) {
    const S* row = logits.data().data() + (int64_t)i * c;
    S mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    S lse = S(0), rowsum = S(0);
    for (int j = 0; j < c; ++j) {
      lse += std::exp(row[j] - mx);
      rowsum += row[j];
    }
    lse = mx + std::log(lse);
    total += lse - (S(1) - s) * row[labels[i]] - (s / S(c)) * rowsum;
  }
  total /= S(b);
  Tensor<S> out = g.make({1}, {total}, {logits});
  g.set_backward(out.id(), [il = logits.id(), io = out.id(), labels = std::move(labels), b, c, s](Graph<S>& g) {
    if (!g.requires_grad(il)) return;
    const S go = g.grad(io)[0];
    auto lv = g.value(il);
    auto gi = g.grad_mut(il);
    const S invb = S(1) / S(b);
    for (int i = 0; i < b; ++i) {
      const S* row = lv.data() + (int64_t)i * c;
      S mx = row[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
      S denom = S(0);
      for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
      S* gx = gi.data() + (int64_t)i * c;
      for (int j = 0; j < c; ++j) {
        const S p = std::exp(row[j] - mx) / denom;
        const S q = (j == labels[i] ? (S(1) - s) : S(0)) + s / S(c);
        gx[j] += go * (p - q) * invb;
      }
    }
  });
  return out;
}

// ==================== selection ops ====================

// Indices of the k largest entries per row, descending by value; ties keep the
// lowest index. Selection itself carries no gradient.
template <typename S>
std::vector<std::vector<int>> topk_rows(const Tensor<S>& x, int k) {
  auto [m, n] = detail::as_rows(x, "topk_rows");
  if (k < 1 || k > n) throw std::invalid_argument("topk_rows: k out of range");
  std::vector<std::vector<int>> res((size_t)m);
  std::vector<int> order(n);
  for (int i = 0; i < m; ++i) {
    const S* row = x.data().data() + (int64_t)i * n;
    for (int j = 0; j < n; ++j) order[j] = j;
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](int a, int b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    res[i].assign(order.begin(), order.begin() + k);
  }
  return res;
}

// Keeps the listed entries per row, replaces the rest with `fill` (a constant,
// default -inf). Gradient flows only through kept entries.
template <typename S>
Tensor<S> mask_except_rows(const Tensor<S>& x, const std::vector<std::vector<int>>& keep, S fill = neg_inf<S>) {
  auto [m, n] = detail::as_rows(x, "mask_except_rows");
  if ((int)keep.size() != m) throw std::invalid_argument("mask_except_rows: row count mismatch");
  Graph<S>& g = *x.graph();
  std::vector<S> v((size_t)x.size(), fill);
  for (int i = 0; i < m; ++i) {
    for (int j : keep[i]) {
      if (j < 0 || j >= n) throw std::out_of_range("mask_except_rows: index out of range");
      v[(int64_t)i * n + j] = x.data()[(int64_t)i * n + j];
    }
  }
  Tensor<S> out = g.make(x.shape(), std::move(v), {x});
  g.set_backward(out.id(), [ix = x.id(), io = out.id(), keep, n = n](Graph<S>& g) {
    if (!g.requires_grad(ix)) return;
    auto go = g.grad(io);
    auto gi = g.grad_mut(ix);
    for (size_t i = 0; i < keep.size(); ++i)
      for (int j : keep[i]) gi[(int64_t)i * n + j] += go[(int64_t)i * n + j];
  });
  return out;
}

}  // namespace s4d

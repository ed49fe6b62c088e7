#include "adatsc/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numeric>

namespace adatsc::ad {

namespace {

using Index = std::int64_t;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `in` laid against `out`, zero on broadcast axes.
std::vector<Index> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = out.size() - 1 - k;
    strides[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa, const std::vector<Index>& sb, F&& f) {
  const Index total = numel(out);
  if (total == 0) return;
  const int r = static_cast<int>(out.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const Index inner = out[r - 1];
  const Index ia_step = sa[r - 1], ib_step = sb[r - 1];
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < total; o += inner) {
    Index pa = ia, pb = ib;
    for (Index j = 0; j < inner; ++j, pa += ia_step, pb += ib_step) f(o + j, pa, pb);
    for (int d = r - 2; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// fwd(a, b) -> value; bwd(a, b, out, g, &ga, &gb) adds partials.
template <typename T, typename Fwd, typename Bwd>
Var<T> binary(const Var<T>& a, const Var<T>& b, Fwd fwd, Bwd bwd) {
  const Shape& sa_shape = a.shape();
  const Shape& sb_shape = b.shape();
  if (sa_shape == sb_shape) {
    const auto& av = a.value();
    const auto& bv = b.value();
    Tensor<T> out(sa_shape);
    const Index n = out.size();
    for (Index i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return make_result<T>(std::move(out), {a, b}, [bwd](Node<T>& self) {
      const auto& av = self.parents[0]->value;
      const auto& bv = self.parents[1]->value;
      Tensor<T>* ga = parent_grad(self, 0);
      Tensor<T>* gb = parent_grad(self, 1);
      const Index n = self.value.size();
      T da, db;
      for (Index i = 0; i < n; ++i) {
        da = db = T(0);
        bwd(av[i], bv[i], self.value[i], self.grad[i], da, db);
        if (ga) (*ga)[i] += da;
        if (gb) (*gb)[i] += db;
      }
    });
  }
  const Shape out_shape = broadcast_shape(sa_shape, sb_shape);
  const auto sa = broadcast_strides(sa_shape, out_shape);
  const auto sb = broadcast_strides(sb_shape, out_shape);
  Tensor<T> out(out_shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) { out[o] = fwd(av[ia], bv[ib]); });
  return make_result<T>(std::move(out), {a, b}, [bwd, sa, sb, out_shape](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Tensor<T>* ga = parent_grad(self, 0);
    Tensor<T>* gb = parent_grad(self, 1);
    for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
      T da = T(0), db = T(0);
      bwd(av[ia], bv[ib], self.value[o], self.grad[o], da, db);
      if (ga) (*ga)[ia] += da;
      if (gb) (*gb)[ib] += db;
    });
  });
}

// fwd(x) -> y; dfdx(x, y) -> local derivative.
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(x.shape());
  const Index n = out.size();
  for (Index i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  return make_result<T>(std::move(out), {x}, [deriv](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    const Index n = self.value.size();
    for (Index i = 0; i < n; ++i) (*gx)[i] += self.grad[i] * deriv(xv[i], self.value[i]);
  });
}

// outer * len * inner decomposition for axis ops.
struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) a.inner *= s[i];
  return a;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, [](T x, T y) { return x + y; },
                [](T, T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, [](T x, T y) { return x - y; },
                [](T, T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, [](T x, T y) { return x * y; },
                [](T x, T y, T, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, [](T x, T y) { return x / y; },
                [](T x, T y, T, T g, T& da, T& db) {
                  da = g / y;
                  db = -g * x / (y * y);
                });
}

template <typename T>
Var<T> neg(const Var<T>& x) {
  return unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  return unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> pow_scalar(const Var<T>& x, T p) {
  return unary(
      x, [p](T v) { return v == T(0) ? (p == T(0) ? T(1) : T(0)) : std::pow(v, p); },
      [p](T v, T) { return v == T(0) ? T(0) : p * std::pow(v, p - T(1)); });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> floor_log(const Var<T>& x, T eps) {
  return unary(
      x, [eps](T v) { return std::log(std::max(v, eps)); },
      [eps](T v, T) { return v < eps ? T(0) : T(1) / v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return unary(x, [](T v) { return std::sqrt(v); },
               [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return unary(x, [](T v) { return std::abs(v); },
               [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> clamp_min(const Var<T>& x, T lo) {
  return unary(x, [lo](T v) { return v < lo ? lo : v; }, [lo](T v, T) { return v < lo ? T(0) : T(1); });
}

template <typename T>
Var<T> shrink(const Var<T>& x, T theta) {
  return unary(
      x,
      [theta](T v) {
        const T m = std::abs(v) - theta;
        return m > T(0) ? (v > T(0) ? m : -m) : T(0);
      },
      [theta](T v, T) { return std::abs(v) > theta ? T(1) : T(0); });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = T(0);
  for (T v : x.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {x}, [](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const T g = self.grad[0];
    for (auto& v : gx->values()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const Index n = x.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> sum_axis(const Var<T>& x, int axis, bool keepdim) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (Index o = 0; o < s.outer; ++o)
    for (Index l = 0; l < s.len; ++l) {
      const T* src = xv.data() + (o * s.len + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return make_result<T>(std::move(out), {x}, [s](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for (Index o = 0; o < s.outer; ++o)
      for (Index l = 0; l < s.len; ++l) {
        T* dst = gx->data() + (o * s.len + l) * s.inner;
        const T* src = self.grad.data() + o * s.inner;
        for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, int axis, bool keepdim) {
  axis = normalize_axis(axis, x.rank());
  const Index n = x.shape()[axis];
  if (n == 0) throw ShapeError("mean over empty axis");
  return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred axis");
      infer = i;
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) shape[infer] = known == 0 ? 0 : x.value().size() / known;
  Tensor<T> out = x.value().reshaped(shape);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const Index n = self.grad.size();
    for (Index i = 0; i < n; ++i) (*gx)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  const Shape& in = x.shape();
  std::vector<Index> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in[i + 1];
  Shape out_shape(r);
  std::vector<Index> src_strides(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  // Map output flat index -> input flat index.
  const Index total = numel(out_shape);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> zero(r, 0);
  for_each_broadcast(out_shape, src_strides, zero, [&](Index o, Index i, Index) { map[o] = i; });
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (Index o = 0; o < total; ++o) out[o] = xv[map[o]];
  return make_result<T>(std::move(out), {x}, [map = std::move(map)](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const Index n = self.grad.size();
    for (Index o = 0; o < n; ++o) (*gx)[map[o]] += self.grad[o];
  });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape)
    throw ShapeError("cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  const auto sx = broadcast_strides(x.shape(), shape);
  std::vector<Index> zero(shape.size(), 0);
  Tensor<T> out(shape);
  const auto& xv = x.value();
  for_each_broadcast(shape, sx, zero, [&](Index o, Index i, Index) { out[o] = xv[i]; });
  return make_result<T>(std::move(out), {x}, [sx, zero, shape](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for_each_broadcast(shape, sx, zero, [&](Index o, Index i, Index) { (*gx)[i] += self.grad[o]; });
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, Index start, Index length) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > s.len)
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     to_string(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  const Index block = length * s.inner;
  for (Index o = 0; o < s.outer; ++o)
    std::copy_n(xv.data() + (o * s.len + start) * s.inner, block, out.data() + o * block);
  return make_result<T>(std::move(out), {x}, [s, start, block](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for (Index o = 0; o < s.outer; ++o) {
      T* dst = gx->data() + (o * s.len + start) * s.inner;
      const T* src = self.grad.data() + o * block;
      for (Index i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of nothing");
  axis = normalize_axis(axis, xs[0].rank());
  Shape out_shape = xs[0].shape();
  Index total_len = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < x.rank(); ++d)
      if (d != axis && x.shape()[d] != out_shape[d])
        throw ShapeError("concat: " + to_string(x.shape()) + " vs " + to_string(out_shape));
    total_len += x.shape()[axis];
  }
  out_shape[axis] = total_len;
  const AxisSplit s = split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& x : xs) {
    offsets.push_back(off);
    const Index block = x.shape()[axis] * s.inner;
    for (Index o = 0; o < s.outer; ++o)
      std::copy_n(x.value().data() + o * block, block, out.data() + (o * s.len + off) * s.inner);
    off += x.shape()[axis];
  }
  return make_result<T>(std::move(out), xs, [s, offsets](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Tensor<T>* gx = parent_grad(self, k);
      if (!gx) continue;
      const Index len = self.parents[k]->value.shape().empty() ? 1 : gx->size() / (s.outer * s.inner);
      const Index block = len * s.inner;
      for (Index o = 0; o < s.outer; ++o) {
        const T* src = self.grad.data() + (o * s.len + offsets[k]) * s.inner;
        T* dst = gx->data() + o * block;
        for (Index i = 0; i < block; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("stack of nothing");
  const int r = xs[0].rank() + 1;
  axis = normalize_axis(axis, r);
  std::vector<Var<T>> expanded;
  expanded.reserve(xs.size());
  for (const auto& x : xs) {
    Shape s = x.shape();
    s.insert(s.begin() + axis, 1);
    expanded.push_back(reshape(x, s));
  }
  return concat(expanded, axis);
}

template <typename T>
Var<T> gather(const Var<T>& x, int axis, const std::vector<Index>& index) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  for (Index i : index)
    if (i < 0 || i >= s.len) throw ShapeError("gather index out of range");
  Shape out_shape = x.shape();
  out_shape[axis] = static_cast<Index>(index.size());
  const Index m = static_cast<Index>(index.size());
  Tensor<T> out(out_shape);
  const auto& xv = x.value();
  for (Index o = 0; o < s.outer; ++o)
    for (Index k = 0; k < m; ++k)
      std::copy_n(xv.data() + (o * s.len + index[k]) * s.inner, s.inner, out.data() + (o * m + k) * s.inner);
  return make_result<T>(std::move(out), {x}, [s, index, m](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for (Index o = 0; o < s.outer; ++o)
      for (Index k = 0; k < m; ++k) {
        T* dst = gx->data() + (o * s.len + index[k]) * s.inner;
        const T* src = self.grad.data() + (o * m + k) * s.inner;
        for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
  });
}

namespace {

// C (+)= op(A) op(B) for row-major buffers.
template <typename T>
void gemm(const T* a, Index ar, Index ac, bool ta, const T* b, Index br, Index bc, bool tb, T* c, bool accumulate) {
  CMapMat<T> A(a, ar, ac);
  CMapMat<T> B(b, br, bc);
  const Index m = ta ? ac : ar;
  const Index n = tb ? br : bc;
  MapMat<T> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!ta && !tb)
    C.noalias() += A * B;
  else if (ta && !tb)
    C.noalias() += A.transpose() * B;
  else if (!ta && tb)
    C.noalias() += A * B.transpose();
  else
    C.noalias() += A.transpose() * B.transpose();
}

}  // namespace

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0])
    throw ShapeError("bmm: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index g = a.shape()[0];
  const Index ar = a.shape()[1], ac = a.shape()[2], br = b.shape()[1], bc = b.shape()[2];
  const Index m = ta ? ac : ar, ka = ta ? ar : ac, kb = tb ? bc : br, n = tb ? br : bc;
  if (ka != kb) throw ShapeError("bmm inner mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out(Shape{g, m, n});
  for (Index i = 0; i < g; ++i)
    gemm(a.value().data() + i * ar * ac, ar, ac, ta, b.value().data() + i * br * bc, br, bc, tb,
         out.data() + i * m * n, false);
  return make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Tensor<T>* ga = parent_grad(self, 0);
    Tensor<T>* gb = parent_grad(self, 1);
    for (Index i = 0; i < g; ++i) {
      const T* dc = self.grad.data() + i * m * n;
      const T* ap = av.data() + i * ar * ac;
      const T* bp = bv.data() + i * br * bc;
      if (ga) {
        // d op(A) = dC op(B)^T
        if (!ta)
          gemm(dc, m, n, false, bp, br, bc, !tb, ga->data() + i * ar * ac, true);
        else
          gemm(bp, br, bc, tb, dc, m, n, true, ga->data() + i * ar * ac, true);
      }
      if (gb) {
        // d op(B) = op(A)^T dC
        if (!tb)
          gemm(ap, ar, ac, !ta, dc, m, n, false, gb->data() + i * br * bc, true);
        else
          gemm(dc, m, n, true, ap, ar, ac, ta, gb->data() + i * br * bc, true);
      }
    }
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects 2-D operands");
  auto a3 = reshape(a, Shape{1, a.shape()[0], a.shape()[1]});
  auto b3 = reshape(b, Shape{1, b.shape()[0], b.shape()[1]});
  auto c = bmm(a3, b3, ta, tb);
  return reshape(c, Shape{c.shape()[1], c.shape()[2]});
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.shape()[0])
    throw ShapeError("linear: " + to_string(x.shape()) + " with weight " + to_string(w.shape()));
  const Index in = w.shape()[0], outd = w.shape()[1];
  const Index rows = x.value().size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<T> out(out_shape);
  gemm(x.value().data(), rows, in, false, w.value().data(), in, outd, false, out.data(), false);
  const bool has_bias = bias.defined();
  if (has_bias) {
    if (bias.value().size() != outd) throw ShapeError("linear: bias size");
    const T* bp = bias.value().data();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < outd; ++j) out[r * outd + j] += bp[j];
  }
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (Tensor<T>* gx = parent_grad(self, 0))
      gemm(self.grad.data(), rows, outd, false, wv.data(), in, outd, true, gx->data(), true);
    if (Tensor<T>* gw = parent_grad(self, 1))
      gemm(xv.data(), rows, in, true, self.grad.data(), rows, outd, false, gw->data(), true);
    if (has_bias) {
      if (Tensor<T>* gb = parent_grad(self, 2))
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < outd; ++j) (*gb)[j] += self.grad[r * outd + j];
    }
  });
}

namespace {

// cols (N*H*W, k*k*C) in (ky, kx, c) order, zero outside the image.
template <typename T>
void im2col(const T* x, Index n, Index h, Index w, Index c, Index k, T* cols) {
  const Index pad = k / 2;
  const Index row_len = k * k * c;
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        T* dst = cols + ((b * h + i) * w + j) * row_len;
        for (Index ky = 0; ky < k; ++ky) {
          const Index yi = i + ky - pad;
          for (Index kx = 0; kx < k; ++kx) {
            const Index xj = j + kx - pad;
            T* d = dst + (ky * k + kx) * c;
            if (yi < 0 || yi >= h || xj < 0 || xj >= w) {
              std::fill_n(d, c, T(0));
            } else {
              std::copy_n(x + ((b * h + yi) * w + xj) * c, c, d);
            }
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, Index n, Index h, Index w, Index c, Index k, T* gx) {
  const Index pad = k / 2;
  const Index row_len = k * k * c;
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const T* src = cols + ((b * h + i) * w + j) * row_len;
        for (Index ky = 0; ky < k; ++ky) {
          const Index yi = i + ky - pad;
          if (yi < 0 || yi >= h) continue;
          for (Index kx = 0; kx < k; ++kx) {
            const Index xj = j + kx - pad;
            if (xj < 0 || xj >= w) continue;
            const T* s = src + (ky * k + kx) * c;
            T* d = gx + ((b * h + yi) * w + xj) * c;
            for (Index ch = 0; ch < c; ++ch) d[ch] += s[ch];
          }
        }
      }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  if (x.rank() != 4 || w.rank() != 4 || w.shape()[0] != w.shape()[1] || w.shape()[2] != x.shape()[3] ||
      w.shape()[0] % 2 == 0)
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " weight " + to_string(w.shape()));
  const Index n = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], c = x.shape()[3];
  const Index k = w.shape()[0], co = w.shape()[3];
  const Index rows = n * h * wd, row_len = k * k * c;
  Tensor<T> out(Shape{n, h, wd, co});
  if (k == 1) {
    gemm(x.value().data(), rows, c, false, w.value().data(), c, co, false, out.data(), false);
  } else {
    std::vector<T> cols(static_cast<std::size_t>(rows * row_len));
    im2col(x.value().data(), n, h, wd, c, k, cols.data());
    gemm(cols.data(), rows, row_len, false, w.value().data(), row_len, co, false, out.data(), false);
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    if (bias.value().size() != co) throw ShapeError("conv2d: bias size");
    const T* bp = bias.value().data();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < co; ++j) out[r * co + j] += bp[j];
  }
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    Tensor<T>* gx = parent_grad(self, 0);
    Tensor<T>* gw = parent_grad(self, 1);
    if (k == 1) {
      if (gx) gemm(self.grad.data(), rows, co, false, wv.data(), c, co, true, gx->data(), true);
      if (gw) gemm(xv.data(), rows, c, true, self.grad.data(), rows, co, false, gw->data(), true);
    } else {
      if (gw) {
        std::vector<T> cols(static_cast<std::size_t>(rows * row_len));
        im2col(xv.data(), n, h, wd, c, k, cols.data());
        gemm(cols.data(), rows, row_len, true, self.grad.data(), rows, co, false, gw->data(), true);
      }
      if (gx) {
        std::vector<T> dcols(static_cast<std::size_t>(rows * row_len));
        gemm(self.grad.data(), rows, co, false, wv.data(), row_len, co, true, dcols.data(), false);
        col2im_add(dcols.data(), n, h, wd, c, k, gx->data());
      }
    }
    if (has_bias) {
      if (Tensor<T>* gb = parent_grad(self, 2))
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < co; ++j) (*gb)[j] += self.grad[r * co + j];
    }
  });
}

template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
  if (x.rank() != 4 || x.shape()[1] % 2 || x.shape()[2] % 2)
    throw ShapeError("maxpool2x2 needs (N,H,W,C) with even H, W; got " + to_string(x.shape()));
  const Index n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  const Index ho = h / 2, wo = w / 2;
  Tensor<T> out(Shape{n, ho, wo, c});
  std::vector<Index> arg(static_cast<std::size_t>(out.size()));
  const auto& xv = x.value();
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j)
        for (Index ch = 0; ch < c; ++ch) {
          Index best = ((b * h + 2 * i) * w + 2 * j) * c + ch;
          for (Index dy = 0; dy < 2; ++dy)
            for (Index dx = 0; dx < 2; ++dx) {
              const Index idx = ((b * h + 2 * i + dy) * w + 2 * j + dx) * c + ch;
              if (xv[idx] > xv[best]) best = idx;
            }
          const Index o = ((b * ho + i) * wo + j) * c + ch;
          out[o] = xv[best];
          arg[static_cast<std::size_t>(o)] = best;
        }
  return make_result<T>(std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    const Index m = self.grad.size();
    for (Index o = 0; o < m; ++o) (*gx)[arg[o]] += self.grad[o];
  });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x needs (N,H,W,C)");
  const Index n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
  Tensor<T> out(Shape{n, 2 * h, 2 * w, c});
  const auto& xv = x.value();
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < 2 * h; ++i)
      for (Index j = 0; j < 2 * w; ++j)
        std::copy_n(xv.data() + ((b * h + i / 2) * w + j / 2) * c, c, out.data() + ((b * 2 * h + i) * 2 * w + j) * c);
  return make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for (Index b = 0; b < n; ++b)
      for (Index i = 0; i < 2 * h; ++i)
        for (Index j = 0; j < 2 * w; ++j) {
          const T* src = self.grad.data() + ((b * 2 * h + i) * 2 * w + j) * c;
          T* dst = gx->data() + ((b * h + i / 2) * w + j / 2) * c;
          for (Index ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const Index len = x.shape().back();
  const Index rows = x.value().size() / len;
  const bool has_gain = gain.defined(), has_bias = bias.defined();
  if ((has_gain && gain.value().size() != len) || (has_bias && bias.value().size() != len))
    throw ShapeError("layer_norm: affine size mismatch for " + to_string(x.shape()));
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.value().size()));
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const auto& xv = x.value();
  for (Index r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * len;
    T mu = T(0);
    for (Index j = 0; j < len; ++j) mu += xr[j];
    mu /= static_cast<T>(len);
    T var = T(0);
    for (Index j = 0; j < len; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(len);
    const T iv = T(1) / std::sqrt(var + eps);
    (*inv)[r] = iv;
    for (Index j = 0; j < len; ++j) {
      const T xh = (xr[j] - mu) * iv;
      (*xhat)[r * len + j] = xh;
      T y = xh;
      if (has_gain) y *= gain.value()[j];
      if (has_bias) y += bias.value()[j];
      out[r * len + j] = y;
    }
  }
  std::vector<Var<T>> parents{x};
  if (has_gain) parents.push_back(gain);
  if (has_bias) parents.push_back(bias);
  return make_result<T>(std::move(out), parents, [=](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    std::size_t pi = 1;
    Tensor<T>* gg = has_gain ? parent_grad(self, pi++) : nullptr;
    Tensor<T>* gb = has_bias ? parent_grad(self, pi++) : nullptr;
    const T* gv = has_gain ? self.parents[1]->value.data() : nullptr;
    std::vector<T> dxh(static_cast<std::size_t>(len));
    for (Index r = 0; r < rows; ++r) {
      const T* dy = self.grad.data() + r * len;
      const T* xh = xhat->data() + r * len;
      T m1 = T(0), m2 = T(0);
      for (Index j = 0; j < len; ++j) {
        const T d = has_gain ? dy[j] * gv[j] : dy[j];
        dxh[j] = d;
        m1 += d;
        m2 += d * xh[j];
        if (gg) (*gg)[j] += dy[j] * xh[j];
        if (gb) (*gb)[j] += dy[j];
      }
      if (!gx) continue;
      m1 /= static_cast<T>(len);
      m2 /= static_cast<T>(len);
      const T iv = (*inv)[r];
      T* dx = gx->data() + r * len;
      for (Index j = 0; j < len; ++j) dx[j] += iv * (dxh[j] - m1 - xh[j] * m2);
    }
  });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const Index len = x.shape().back();
  const Index rows = x.value().size() / len;
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (Index r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * len;
    T* yr = out.data() + r * len;
    T mx = -std::numeric_limits<T>::infinity();
    for (Index j = 0; j < len; ++j) {
      if (!std::isfinite(xr[j])) throw NumericError("softmax: non-finite scores");
      mx = std::max(mx, xr[j]);
    }
    T s = T(0);
    for (Index j = 0; j < len; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (Index j = 0; j < len; ++j) yr[j] /= s;
  }
  return make_result<T>(std::move(out), {x}, [len, rows](Node<T>& self) {
    Tensor<T>* gx = parent_grad(self, 0);
    if (!gx) return;
    for (Index r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * len;
      const T* dy = self.grad.data() + r * len;
      T dot = T(0);
      for (Index j = 0; j < len; ++j) dot += dy[j] * y[j];
      T* dx = gx->data() + r * len;
      for (Index j = 0; j < len; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Var<T> lstm_pointwise(const Var<T>& pre, const Var<T>& c) {
  const Index f = c.shape().back();
  if (pre.shape().back() != 4 * f || pre.value().size() != 4 * c.value().size())
    throw ShapeError("lstm_pointwise: gates " + to_string(pre.shape()) + " vs cell " + to_string(c.shape()));
  const Index rows = c.value().size() / f;
  Shape out_shape = c.shape();
  out_shape.back() = 2 * f;
  Tensor<T> out(out_shape);
  // Cache activated gates [i, f, o, g] for backward.
  auto act = std::make_shared<std::vector<T>>(static_cast<std::size_t>(pre.value().size()));
  const auto& pv = pre.value();
  const auto& cv = c.value();
  for (Index r = 0; r < rows; ++r) {
    const T* p = pv.data() + r * 4 * f;
    T* a = act->data() + r * 4 * f;
    T* o = out.data() + r * 2 * f;
    const T* cp = cv.data() + r * f;
    for (Index j = 0; j < f; ++j) {
      const T ig = sigmoid_value(p[j]);
      const T fg = sigmoid_value(p[f + j]);
      const T og = sigmoid_value(p[2 * f + j]);
      const T gg = std::tanh(p[3 * f + j]);
      a[j] = ig;
      a[f + j] = fg;
      a[2 * f + j] = og;
      a[3 * f + j] = gg;
      const T cn = fg * cp[j] + ig * gg;
      o[f + j] = cn;
      o[j] = og * std::tanh(cn);
    }
  }
  return make_result<T>(std::move(out), {pre, c}, [act, f, rows](Node<T>& self) {
    Tensor<T>* gp = parent_grad(self, 0);
    Tensor<T>* gc = parent_grad(self, 1);
    const auto& cv = self.parents[1]->value;
    for (Index r = 0; r < rows; ++r) {
      const T* a = act->data() + r * 4 * f;
      const T* o = self.value.data() + r * 2 * f;
      const T* d = self.grad.data() + r * 2 * f;
      const T* cp = cv.data() + r * f;
      for (Index j = 0; j < f; ++j) {
        const T ig = a[j], fg = a[f + j], og = a[2 * f + j], gg = a[3 * f + j];
        const T tc = std::tanh(o[f + j]);
        const T dh = d[j];
        const T dc = d[f + j] + dh * og * (T(1) - tc * tc);
        if (gp) {
          T* g = gp->data() + r * 4 * f;
          g[j] += dc * gg * ig * (T(1) - ig);
          g[f + j] += dc * cp[j] * fg * (T(1) - fg);
          g[2 * f + j] += dh * tc * og * (T(1) - og);
          g[3 * f + j] += dc * ig * (T(1) - gg * gg);
        }
        if (gc) (*gc)[r * f + j] += dc * fg;
      }
    }
  });
}

template <typename T>
Var<T> pairwise_sqdist(const Var<T>& a, const Var<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    throw ShapeError("pairwise_sqdist: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const Index n = a.shape()[0], m = b.shape()[0], d = a.shape()[1];
  Tensor<T> out(Shape{n, m});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) {
      T s = T(0);
      for (Index k = 0; k < d; ++k) {
        const T diff = av[i * d + k] - bv[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = s;
    }
  return make_result<T>(std::move(out), {a, b}, [n, m, d](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    Tensor<T>* ga = parent_grad(self, 0);
    Tensor<T>* gb = parent_grad(self, 1);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) {
        const T g = T(2) * self.grad[i * m + j];
        for (Index k = 0; k < d; ++k) {
          const T diff = av[i * d + k] - bv[j * d + k];
          if (ga) (*ga)[i * d + k] += g * diff;
          if (gb) (*gb)[j * d + k] -= g * diff;
        }
      }
  });
}

#define ADATSC_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                               \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                               \
  template Var<T> div(const Var<T>&, const Var<T>&);                                               \
  template Var<T> neg(const Var<T>&);                                                              \
  template Var<T> scale(const Var<T>&, T);                                                         \
  template Var<T> add_scalar(const Var<T>&, T);                                                    \
  template Var<T> pow_scalar(const Var<T>&, T);                                                    \
  template Var<T> exp(const Var<T>&);                                                              \
  template Var<T> log(const Var<T>&);                                                              \
  template Var<T> floor_log(const Var<T>&, T);                                                     \
  template Var<T> sqrt(const Var<T>&);                                                             \
  template Var<T> square(const Var<T>&);                                                           \
  template Var<T> abs(const Var<T>&);                                                              \
  template Var<T> relu(const Var<T>&);                                                             \
  template Var<T> sigmoid(const Var<T>&);                                                          \
  template Var<T> tanh(const Var<T>&);                                                             \
  template Var<T> clamp_min(const Var<T>&, T);                                                     \
  template Var<T> shrink(const Var<T>&, T);                                                        \
  template Var<T> sum(const Var<T>&);                                                              \
  template Var<T> mean(const Var<T>&);                                                             \
  template Var<T> sum_axis(const Var<T>&, int, bool);                                              \
  template Var<T> mean_axis(const Var<T>&, int, bool);                                             \
  template Var<T> reshape(const Var<T>&, Shape);                                                   \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                 \
  template Var<T> broadcast_to(const Var<T>&, const Shape&);                                       \
  template Var<T> slice(const Var<T>&, int, Index, Index);                                         \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                         \
  template Var<T> stack(const std::vector<Var<T>>&, int);                                          \
  template Var<T> gather(const Var<T>&, int, const std::vector<Index>&);                           \
  template Var<T> matmul(const Var<T>&, const Var<T>&, bool, bool);                                \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, bool);                                   \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> maxpool2x2(const Var<T>&);                                                       \
  template Var<T> upsample2x(const Var<T>&);                                                       \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                      \
  template Var<T> softmax_last(const Var<T>&);                                                     \
  template Var<T> lstm_pointwise(const Var<T>&, const Var<T>&);                                    \
  template Var<T> pairwise_sqdist(const Var<T>&, const Var<T>&);

ADATSC_INSTANTIATE_OPS(float)
ADATSC_INSTANTIATE_OPS(double)

}  // namespace adatsc::ad

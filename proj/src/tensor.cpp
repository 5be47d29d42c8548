// Copyright 2026 The PBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "pbr/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "pbr/error.hpp"

namespace pbr {
namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) +
                   " and " + shape_string(b));
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(s));
  }
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return axis;
}

// Splits a shape into [outer, axis, inner] extents around `axis`.
struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit out;
  for (int i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

template <typename T>
bool needs_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

// Strides of `s` against the broadcast output shape (0 on broadcast axes).
std::vector<Index> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index stride = 1;
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    strides[i] = s[i] == 1 && out[i] != 1 ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size()) shape_mismatch(op, a, b);
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else {
      shape_mismatch(op, a, b);
    }
  }
  return out;
}

// Visits every output element with the matching flat offsets into a and b.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, F&& f) {
  const int rank = static_cast<int>(out.size());
  const Index total = shape_numel(out);
  std::vector<Index> idx(rank, 0);
  Index oa = 0, ob = 0;
  for (Index i = 0; i < total; ++i) {
    f(i, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (out[d] - 1);
      ob -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const char* op, BinaryKind kind, const Tensor<T>& a,
                 const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Buffer<T> out(shape_numel(out_shape));
  const T* pa = a.raw();
  const T* pb = b.raw();
  for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
    switch (kind) {
      case BinaryKind::kAdd: out[i] = pa[ia] + pb[ib]; break;
      case BinaryKind::kSub: out[i] = pa[ia] - pb[ib]; break;
      case BinaryKind::kMul: out[i] = pa[ia] * pb[ib]; break;
    }
  });
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return Tensor<T>::make_result(
      out_shape, std::move(out), {a, b},
      [an, bn, out_shape, sa, sb, kind](TensorNode<T>& self) {
        Buffer<T> ga, gb;
        if (an->requires_grad) ga.assign(an->data.size(), T(0));
        if (bn->requires_grad) gb.assign(bn->data.size(), T(0));
        const T* g = self.grad.data();
        for_each_broadcast(out_shape, sa, sb, [&](Index i, Index ia, Index ib) {
          switch (kind) {
            case BinaryKind::kAdd:
              if (!ga.empty()) ga[ia] += g[i];
              if (!gb.empty()) gb[ib] += g[i];
              break;
            case BinaryKind::kSub:
              if (!ga.empty()) ga[ia] += g[i];
              if (!gb.empty()) gb[ib] -= g[i];
              break;
            case BinaryKind::kMul:
              if (!ga.empty()) ga[ia] += g[i] * bn->data[ib];
              if (!gb.empty()) gb[ib] += g[i] * an->data[ia];
              break;
          }
        });
        if (!ga.empty()) an->accumulate(ga);
        if (!gb.empty()) bn->accumulate(gb);
      });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
void TensorNode<T>::accumulate(std::span<const T> g) {
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

template <typename T>
std::span<T> TensorNode<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, Buffer<T> data,
                               bool requires_grad) {
  if (shape_numel(shape) != static_cast<Index>(data.size())) {
    throw ShapeError("from_data: shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  Tensor t;
  t.node_ = std::make_shared<TensorNode<T>>();
  t.node_->shape = std::move(shape);
  t.node_->data = std::move(data);
  t.node_->requires_grad = requires_grad;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::make_result(Shape shape, Buffer<T> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(TensorNode<T>&)> backward) {
  Tensor out = from_data(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return needs_grad(p); });
  if (!any) return out;
  out.node_->requires_grad = true;
  for (auto& p : parents) {
    if (needs_grad(p)) out.node_->parents.push_back(p.node_);
  }
  out.node_->backward = std::move(backward);
  return out;
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  return node_->shape.at(normalize_axis(axis, rank()));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(node_->shape, node_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " +
                     shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      TensorNode<T>* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  const T one = T(1);
  node_->accumulate(std::span<const T>(&one, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dOptions opts) {
  require_rank("conv2d input", x.shape(), 4);
  require_rank("conv2d weight", weight.shape(), 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const Index groups = opts.groups;
  if (groups < 1 || c % groups != 0 || o % groups != 0 ||
      weight.dim(1) != c / groups) {
    shape_mismatch("conv2d", x.shape(), weight.shape());
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    shape_mismatch("conv2d bias", weight.shape(), bias.shape());
  }
  const Index ho = (h + 2 * opts.pad_h - kh) / opts.stride_h + 1;
  const Index wo = (w + 2 * opts.pad_w - kw) / opts.stride_w + 1;
  if (ho <= 0 || wo <= 0) shape_mismatch("conv2d", x.shape(), weight.shape());

  const Index cg = c / groups, og = o / groups;
  const Index plane = ho * wo;
  const Index krows = cg * kh * kw;
  const Index cols_n = n * plane;

  // cols[g] is (cg*kh*kw) x (n*ho*wo).
  auto cols = std::make_shared<std::vector<RowMat<T>>>(groups);
  const T* xd = x.raw();
  for (Index g = 0; g < groups; ++g) {
    RowMat<T>& m = (*cols)[g];
    m.setZero(krows, cols_n);
    for (Index cl = 0; cl < cg; ++cl) {
      for (Index i = 0; i < kh; ++i) {
        for (Index j = 0; j < kw; ++j) {
          T* row = m.row((cl * kh + i) * kw + j).data();
          for (Index b = 0; b < n; ++b) {
            const T* src = xd + (b * c + g * cg + cl) * h * w;
            for (Index oy = 0; oy < ho; ++oy) {
              const Index iy = oy * opts.stride_h - opts.pad_h + i;
              if (iy < 0 || iy >= h) continue;
              T* dst = row + b * plane + oy * wo;
              for (Index ox = 0; ox < wo; ++ox) {
                const Index ix = ox * opts.stride_w - opts.pad_w + j;
                if (ix >= 0 && ix < w) dst[ox] = src[iy * w + ix];
              }
            }
          }
        }
      }
    }
  }

  Buffer<T> out(n * o * plane);
  ConstMatMap<T> wmat(weight.raw(), o, krows);
  RowMat<T> prod;
  for (Index g = 0; g < groups; ++g) {
    prod.noalias() = wmat.middleRows(g * og, og) * (*cols)[g];
    for (Index ol = 0; ol < og; ++ol) {
      const Index oc = g * og + ol;
      const T bv = bias.defined() ? bias.raw()[oc] : T(0);
      for (Index b = 0; b < n; ++b) {
        T* dst = out.data() + (b * o + oc) * plane;
        const T* src = prod.row(ol).data() + b * plane;
        for (Index p = 0; p < plane; ++p) dst[p] = src[p] + bv;
      }
    }
  }

  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return Tensor<T>::make_result(
      {n, o, ho, wo}, std::move(out), {x, weight, bias},
      [=](TensorNode<T>& self) {
        RowMat<T> dout(og, cols_n);
        Buffer<T> dw(wn->requires_grad ? wn->data.size() : 0, T(0));
        Buffer<T> db(bn && bn->requires_grad ? o : 0, T(0));
        Buffer<T> dx(xn->requires_grad ? xn->data.size() : 0, T(0));
        ConstMatMap<T> wm(wn->data.data(), o, krows);
        for (Index g = 0; g < groups; ++g) {
          for (Index ol = 0; ol < og; ++ol) {
            const Index oc = g * og + ol;
            T* dst = dout.row(ol).data();
            for (Index b = 0; b < n; ++b) {
              const T* src = self.grad.data() + (b * o + oc) * plane;
              std::copy(src, src + plane, dst + b * plane);
            }
            if (!db.empty()) db[oc] += dout.row(ol).sum();
          }
          if (!dw.empty()) {
            MatMap<T> dwm(dw.data(), o, krows);
            dwm.middleRows(g * og, og).noalias() += dout * (*cols)[g].transpose();
          }
          if (!dx.empty()) {
            const RowMat<T> dcols = wm.middleRows(g * og, og).transpose() * dout;
            for (Index cl = 0; cl < cg; ++cl) {
              for (Index i = 0; i < kh; ++i) {
                for (Index j = 0; j < kw; ++j) {
                  const T* row = dcols.row((cl * kh + i) * kw + j).data();
                  for (Index b = 0; b < n; ++b) {
                    T* dst = dx.data() + (b * c + g * cg + cl) * h * w;
                    for (Index oy = 0; oy < ho; ++oy) {
                      const Index iy = oy * opts.stride_h - opts.pad_h + i;
                      if (iy < 0 || iy >= h) continue;
                      const T* src = row + b * plane + oy * wo;
                      for (Index ox = 0; ox < wo; ++ox) {
                        const Index ix = ox * opts.stride_w - opts.pad_w + j;
                        if (ix >= 0 && ix < w) dst[iy * w + ix] += src[ox];
                      }
                    }
                  }
                }
              }
            }
          }
        }
        if (!dw.empty()) wn->accumulate(dw);
        if (!db.empty()) bn->accumulate(db);
        if (!dx.empty()) xn->accumulate(dx);
      });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int pad) {
  require_rank("conv1d input", x.shape(), 3);
  require_rank("conv1d weight", weight.shape(), 3);
  auto x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
  auto w4 = reshape(weight, {weight.dim(0), weight.dim(1), 1, weight.dim(2)});
  auto y = conv2d(x4, w4, bias, {.pad_w = pad});
  return reshape(y, {y.dim(0), y.dim(1), y.dim(3)});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  require_rank("linear input", x.shape(), 2);
  require_rank("linear weight", weight.shape(), 2);
  const Index n = x.dim(0), f = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != f) shape_mismatch("linear", x.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    shape_mismatch("linear bias", weight.shape(), bias.shape());
  }
  Buffer<T> out(n * o);
  MatMap<T> om(out.data(), n, o);
  ConstMatMap<T> xm(x.raw(), n, f);
  ConstMatMap<T> wm(weight.raw(), o, f);
  om.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.raw(), o);
    om.rowwise() += bv;
  }
  auto xn = x.node_ptr();
  auto wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return Tensor<T>::make_result(
      {n, o}, std::move(out), {x, weight, bias}, [=](TensorNode<T>& self) {
        ConstMatMap<T> g(self.grad.data(), n, o);
        if (xn->requires_grad) {
          Buffer<T> dx(n * f);
          MatMap<T>(dx.data(), n, f).noalias() =
              g * ConstMatMap<T>(wn->data.data(), o, f);
          xn->accumulate(dx);
        }
        if (wn->requires_grad) {
          Buffer<T> dw(o * f);
          MatMap<T>(dw.data(), o, f).noalias() =
              g.transpose() * ConstMatMap<T>(xn->data.data(), n, f);
          wn->accumulate(dw);
        }
        if (bn && bn->requires_grad) {
          Buffer<T> db(o);
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db.data(), o) =
              g.colwise().sum();
          bn->accumulate(db);
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [xn](TensorNode<T>& self) {
                                  Buffer<T> g(self.grad);
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                    if (!(xn->data[i] > T(0))) g[i] = T(0);
                                  }
                                  xn->accumulate(g);
                                });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Buffer<T> out(x.numel());
  const T* xd = x.raw();
  for (Index a = 0; a < s.outer; ++a) {
    for (Index b = 0; b < s.inner; ++b) {
      const Index base = a * s.len * s.inner + b;
      T mx = xd[base];
      for (Index k = 1; k < s.len; ++k) mx = std::max(mx, xd[base + k * s.inner]);
      T total = T(0);
      for (Index k = 0; k < s.len; ++k) {
        const T e = std::exp(xd[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (Index k = 0; k < s.len; ++k) out[base + k * s.inner] /= total;
    }
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      x.shape(), out, {x}, [xn, s, y = out](TensorNode<T>& self) {
        Buffer<T> g(y.size());
        for (Index a = 0; a < s.outer; ++a) {
          for (Index b = 0; b < s.inner; ++b) {
            const Index base = a * s.len * s.inner + b;
            T dot = T(0);
            for (Index k = 0; k < s.len; ++k) {
              const Index i = base + k * s.inner;
              dot += self.grad[i] * y[i];
            }
            for (Index k = 0; k < s.len; ++k) {
              const Index i = base + k * s.inner;
              g[i] = y[i] * (self.grad[i] - dot);
            }
          }
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Buffer<T> out(s.outer * s.inner, T(0));
  const T* xd = x.raw();
  for (Index a = 0; a < s.outer; ++a) {
    for (Index k = 0; k < s.len; ++k) {
      for (Index b = 0; b < s.inner; ++b) {
        out[a * s.inner + b] += xd[(a * s.len + k) * s.inner + b];
      }
    }
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x}, [xn, s](TensorNode<T>& self) {
        Buffer<T> g(xn->data.size());
        for (Index a = 0; a < s.outer; ++a) {
          for (Index k = 0; k < s.len; ++k) {
            for (Index b = 0; b < s.inner; ++b) {
              g[(a * s.len + k) * s.inner + b] = self.grad[a * s.inner + b];
            }
          }
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto xn = x.node_ptr();
  return Tensor<T>::make_result({}, {total}, {x}, [xn](TensorNode<T>& self) {
    Buffer<T> g(xn->data.size(), self.grad[0]);
    xn->accumulate(g);
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", BinaryKind::kAdd, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", BinaryKind::kSub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", BinaryKind::kMul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [xn, factor](TensorNode<T>& self) {
                                  Buffer<T> g(self.grad);
                                  for (T& v : g) v *= factor;
                                  xn->accumulate(g);
                                });
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x, T beta) {
  if (!(beta > T(0))) throw InvalidArgument("smooth_l1: beta must be > 0");
  Buffer<T> out(x.numel());
  const T* xd = x.raw();
  for (Index i = 0; i < x.numel(); ++i) {
    const T a = std::abs(xd[i]);
    out[i] = a < beta ? T(0.5) * xd[i] * xd[i] / beta : a - T(0.5) * beta;
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [xn, beta](TensorNode<T>& self) {
        Buffer<T> g(self.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = xn->data[i];
          const T d = std::abs(v) < beta ? v / beta : (v > T(0) ? T(1) : T(-1));
          g[i] = self.grad[i] * d;
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("cross_entropy", logits.shape(), 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for logits " + shape_string(logits.shape()));
  }
  if (n == 0) return Tensor<T>::scalar(T(0));
  Buffer<T> probs(n * k);
  T loss = T(0);
  const T* xd = logits.raw();
  for (Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw InvalidArgument("cross_entropy: label out of range");
    }
    const T* row = xd + i * k;
    const T mx = *std::max_element(row, row + k);
    T total = T(0);
    for (Index j = 0; j < k; ++j) {
      probs[i * k + j] = std::exp(row[j] - mx);
      total += probs[i * k + j];
    }
    for (Index j = 0; j < k; ++j) probs[i * k + j] /= total;
    loss += mx + std::log(total) - row[labels[i]];
  }
  loss /= static_cast<T>(n);
  auto xn = logits.node_ptr();
  std::vector<int> lab(labels.begin(), labels.end());
  return Tensor<T>::make_result(
      {}, {loss}, {logits},
      [xn, n, k, probs = std::move(probs), lab = std::move(lab)](TensorNode<T>& self) {
        Buffer<T> g(probs);
        const T s = self.grad[0] / static_cast<T>(n);
        for (Index i = 0; i < n; ++i) {
          g[i * k + lab[i]] -= T(1);
          for (Index j = 0; j < k; ++j) g[i * k + j] *= s;
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_mismatch("reshape", x.shape(), shape);
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), {x},
      [xn](TensorNode<T>& self) { xn->accumulate(self.grad); });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2 on " + shape_string(x.shape()));
  const Index r = x.dim(-2), c = x.dim(-1);
  const Index batch = x.numel() / (r * c);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  auto permute = [batch, r, c](const T* src, T* dst) {
    for (Index b = 0; b < batch; ++b) {
      for (Index i = 0; i < r; ++i) {
        for (Index j = 0; j < c; ++j) dst[b * r * c + j * r + i] = src[b * r * c + i * c + j];
      }
    }
  };
  Buffer<T> out(x.numel());
  permute(x.raw(), out.data());
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x},
      [xn, batch, r, c](TensorNode<T>& self) {
        // The gradient is permuted back with the roles of r and c swapped.
        Buffer<T> g(self.grad.size());
        for (Index b = 0; b < batch; ++b) {
          for (Index j = 0; j < c; ++j) {
            for (Index i = 0; i < r; ++i) {
              g[b * r * c + i * c + j] = self.grad[b * r * c + j * r + i];
            }
          }
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  require_rank("upsample2x", x.shape(), 4);
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Buffer<T> out(nc * 4 * h * w);
  const T* xd = x.raw();
  for (Index p = 0; p < nc; ++p) {
    for (Index y = 0; y < 2 * h; ++y) {
      for (Index xx = 0; xx < 2 * w; ++xx) {
        out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {x},
      [xn, nc, h, w](TensorNode<T>& self) {
        Buffer<T> g(xn->data.size(), T(0));
        for (Index p = 0; p < nc; ++p) {
          for (Index y = 0; y < 2 * h; ++y) {
            for (Index xx = 0; xx < 2 * w; ++xx) {
              g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
            }
          }
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> gather_groups(const Tensor<T>& x, std::span<const Index> rows,
                        std::span<const Index> groups, Index width) {
  require_rank("gather_groups", x.shape(), 2);
  if (rows.size() != groups.size()) {
    throw ShapeError("gather_groups: rows and groups differ in length");
  }
  const Index n = x.dim(0), k = x.dim(1);
  const Index m = static_cast<Index>(rows.size());
  std::vector<Index> offsets(m);
  for (Index i = 0; i < m; ++i) {
    if (rows[i] < 0 || rows[i] >= n || groups[i] < 0 || (groups[i] + 1) * width > k) {
      throw ShapeError("gather_groups: index out of range for " +
                       shape_string(x.shape()));
    }
    offsets[i] = rows[i] * k + groups[i] * width;
  }
  Buffer<T> out(m * width);
  for (Index i = 0; i < m; ++i) {
    std::copy_n(x.raw() + offsets[i], width, out.data() + i * width);
  }
  auto xn = x.node_ptr();
  return Tensor<T>::make_result(
      {m, width}, std::move(out), {x},
      [xn, offsets = std::move(offsets), width](TensorNode<T>& self) {
        Buffer<T> g(xn->data.size(), T(0));
        for (std::size_t i = 0; i < offsets.size(); ++i) {
          for (Index j = 0; j < width; ++j) g[offsets[i] + j] += self.grad[i * width + j];
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> index_rows(const Tensor<T>& x, std::span<const Index> rows) {
  if (x.rank() < 1) throw ShapeError("index_rows on a scalar");
  const Index n = x.dim(0);
  const Index stride = n == 0 ? 0 : x.numel() / n;
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<Index>(rows.size());
  Buffer<T> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) throw ShapeError("index_rows: row out of range");
    std::copy_n(x.raw() + rows[i] * stride, stride, out.data() + i * stride);
  }
  auto xn = x.node_ptr();
  std::vector<Index> r(rows.begin(), rows.end());
  return Tensor<T>::make_result(
      std::move(out_shape), std::move(out), {x},
      [xn, r = std::move(r), stride](TensorNode<T>& self) {
        Buffer<T> g(xn->data.size(), T(0));
        for (std::size_t i = 0; i < r.size(); ++i) {
          for (Index j = 0; j < stride; ++j) g[r[i] * stride + j] += self.grad[i * stride + j];
        }
        xn->accumulate(g);
      });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  axis = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) shape_mismatch("concat", b, a);
    a[axis] = b[axis] = 0;
    if (a != b) shape_mismatch("concat", parts[0].shape(), p.shape());
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_at(out_shape, axis);
  Buffer<T> out(shape_numel(out_shape));
  std::vector<Index> starts;
  Index start = 0;
  for (const auto& p : parts) {
    starts.push_back(start);
    const Index len = p.dim(axis);
    for (Index a = 0; a < s.outer; ++a) {
      std::copy_n(p.raw() + a * len * s.inner, len * s.inner,
                  out.data() + (a * s.len + start) * s.inner);
    }
    start += len;
  }
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return Tensor<T>::make_result(
      out_shape, std::move(out), parts,
      [nodes, starts, s](TensorNode<T>& self) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          const Index len = static_cast<Index>(nodes[i]->data.size()) / (s.outer * s.inner);
          Buffer<T> g(nodes[i]->data.size());
          for (Index a = 0; a < s.outer; ++a) {
            std::copy_n(self.grad.data() + (a * s.len + starts[i]) * s.inner, len * s.inner,
                        g.data() + a * len * s.inner);
          }
          nodes[i]->accumulate(g);
        }
      });
}

#define PBR_INSTANTIATE_TENSOR(T)                                               \
  template struct TensorNode<T>;                                                \
  template class Tensor<T>;                                                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&,                 \
                            const Tensor<T>&, Conv2dOptions);                   \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&,                 \
                            const Tensor<T>&, int);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&,                 \
                            const Tensor<T>&);                                  \
  template Tensor<T> relu(const Tensor<T>&);                                    \
  template Tensor<T> softmax(const Tensor<T>&, int);                            \
  template Tensor<T> sum(const Tensor<T>&, int);                                \
  template Tensor<T> sum_all(const Tensor<T>&);                                 \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                \
  template Tensor<T> smooth_l1(const Tensor<T>&, T);                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                          \
  template Tensor<T> transpose_last2(const Tensor<T>&);                         \
  template Tensor<T> upsample2x(const Tensor<T>&);                              \
  template Tensor<T> gather_groups(const Tensor<T>&, std::span<const Index>,    \
                                   std::span<const Index>, Index);              \
  template Tensor<T> index_rows(const Tensor<T>&, std::span<const Index>);     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);

PBR_INSTANTIATE_TENSOR(float)
PBR_INSTANTIATE_TENSOR(double)

}  // namespace pbr

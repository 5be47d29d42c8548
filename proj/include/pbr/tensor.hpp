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

#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// Tensor<T> is a cheap handle (shared ownership) onto a graph node. Every op
// is a free function; when any operand requires a gradient the result
// records its parents and a backward closure. Everything is instantiated
// for float (training) and double (gradient-check shadow).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pbr {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Cache-line aligned allocation. Vectorized loops pick their scalar
/// prologue from the buffer address, so a fixed alignment keeps every
/// reduction order, and therefore every result, independent of the heap.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  /// Adds `g` into grad, allocating zeros on first use.
  void accumulate(std::span<const T> g);
  std::span<T> grad_buffer();
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  static Tensor from_data(Shape shape, Buffer<T> data,
                          bool requires_grad = false);
  template <typename Alloc>
  static Tensor from_data(Shape shape, const std::vector<T, Alloc>& data,
                          bool requires_grad = false) {
    return from_data(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad);
  }
  static Tensor scalar(T value) { return from_data({}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* raw() { return node_->data.data(); }
  const T* raw() const { return node_->data.data(); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  /// Sets the gradient buffer to zeros (allocating it if needed).
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  /// Copy of the values without graph history.
  Tensor detach() const;
  /// Reverse-mode sweep from this scalar.
  void backward() const;

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }

  /// Builds the result of an op. `parents` are only recorded when one of
  /// them requires a gradient and grad mode is enabled.
  static Tensor make_result(Shape shape, Buffer<T> data,
                            std::vector<Tensor> parents,
                            std::function<void(TensorNode<T>&)> backward);

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x, bool requires_grad = false) {
  Buffer<To> data(x.data().begin(), x.data().end());
  return Tensor<To>::from_data(x.shape(), std::move(data), requires_grad);
}

struct Conv2dOptions {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  int groups = 1;
};

/// x: [N,C,H,W], weight: [O, C/groups, kh, kw], bias: [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, Conv2dOptions opts = {});

/// x: [N,C,L], weight: [O,C,kw]; zero padding `pad` on both ends.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias, int pad);

/// x: [N,F], weight: [O,F], bias: [O] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Sum over one axis; the axis is kept with extent 1.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);

/// Elementwise ops with broadcasting of extent-1 axes (equal rank).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x, T beta = T(1));

/// Mean softmax cross-entropy of logits [N,K] against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x);

/// Nearest-neighbour 2x upsampling of [N,C,H,W].
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);

/// out[i, :] = x[rows[i], groups[i]*width : (groups[i]+1)*width] for x [N,K].
template <typename T>
Tensor<T> gather_groups(const Tensor<T>& x, std::span<const Index> rows,
                        std::span<const Index> groups, Index width);

/// Concatenation along `axis`; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

/// Rows of x (first axis) in the given order.
template <typename T>
Tensor<T> index_rows(const Tensor<T>& x, std::span<const Index> rows);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(T factor, const Tensor<T>& x) { return scale(x, factor); }

}  // namespace pbr

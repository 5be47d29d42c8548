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

#include "pbr/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pbr/error.hpp"

namespace pbr {
namespace {

struct Tap {
  Index cell;    // output bin index in [0, out*out)
  Index offset;  // spatial offset into the H*W plane
  double weight;
};

// Bilinear taps of every sample point of one roi on an h x w map.
std::vector<Tap> roi_taps(const Box& box, double stride, Index h, Index w,
                          const RoiAlignOptions& opts) {
  if (!box.valid()) {
    throw DegenerateBox("roi_align: degenerate box");
  }
  const double x0 = box.x1 / stride, y0 = box.y1 / stride;
  const double bw = box.width() / stride / opts.out;
  const double bh = box.height() / stride / opts.out;
  const int s = opts.sampling;
  const double sample_weight = 1.0 / (s * s);
  std::vector<Tap> taps;
  taps.reserve(static_cast<std::size_t>(opts.out * opts.out * s * s * 4));
  for (int i = 0; i < opts.out; ++i) {
    for (int j = 0; j < opts.out; ++j) {
      const Index cell = i * opts.out + j;
      for (int a = 0; a < s; ++a) {
        const double y = y0 + (i + (a + 0.5) / s) * bh;
        for (int b = 0; b < s; ++b) {
          const double x = x0 + (j + (b + 0.5) / s) * bw;
          const double fy = std::floor(y), fx = std::floor(x);
          const double ly = y - fy, lx = x - fx;
          const auto iy = static_cast<Index>(fy), ix = static_cast<Index>(fx);
          const Index ys[2] = {iy, iy + 1};
          const Index xs[2] = {ix, ix + 1};
          const double wy[2] = {1 - ly, ly};
          const double wx[2] = {1 - lx, lx};
          for (int u = 0; u < 2; ++u) {
            if (ys[u] < 0 || ys[u] >= h) continue;
            for (int v = 0; v < 2; ++v) {
              if (xs[v] < 0 || xs[v] >= w) continue;
              const double wt = sample_weight * wy[u] * wx[v];
              if (wt != 0) taps.push_back({cell, ys[u] * w + xs[v], wt});
            }
          }
        }
      }
    }
  }
  return taps;
}

template <typename T>
Tensor<T> pool_rois(std::vector<Tensor<T>> levels, std::span<const Roi> rois,
                    std::span<const int> level_of, std::span<const double> strides,
                    const RoiAlignOptions& opts) {
  if (opts.out < 1 || opts.sampling < 1) {
    throw InvalidArgument("roi_align: out and sampling must be >= 1");
  }
  const Index c = levels[0].dim(1);
  for (const auto& l : levels) {
    if (l.rank() != 4 || l.dim(1) != c) {
      throw ShapeError("roi_align: level shape " + shape_string(l.shape()));
    }
  }
  const Index r = static_cast<Index>(rois.size());
  const Index cells = Index(opts.out) * opts.out;

  struct RoiTaps {
    int level;
    Index base;  // offset of (batch, channel 0) in the level buffer
    Index plane;
    std::vector<Tap> taps;
  };
  std::vector<RoiTaps> all(r);
  for (Index i = 0; i < r; ++i) {
    const int li = level_of[i];
    const Tensor<T>& lv = levels[li];
    if (rois[i].batch < 0 || rois[i].batch >= lv.dim(0)) {
      throw ShapeError("roi_align: batch index out of range");
    }
    const Index plane = lv.dim(2) * lv.dim(3);
    all[i] = {li, rois[i].batch * c * plane, plane,
              roi_taps(rois[i].box, strides[li], lv.dim(2), lv.dim(3), opts)};
  }

  Buffer<T> out(r * c * cells, T(0));
  for (Index i = 0; i < r; ++i) {
    const RoiTaps& rt = all[i];
    const T* src = levels[rt.level].raw() + rt.base;
    T* dst = out.data() + i * c * cells;
    for (Index ch = 0; ch < c; ++ch) {
      const T* plane = src + ch * rt.plane;
      T* o = dst + ch * cells;
      for (const Tap& t : rt.taps) o[t.cell] += static_cast<T>(t.weight) * plane[t.offset];
    }
  }

  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& l : levels) nodes.push_back(l.node_ptr());
  return Tensor<T>::make_result(
      {r, c, opts.out, opts.out}, std::move(out), levels,
      [nodes, all = std::move(all), c, cells](TensorNode<T>& self) {
        std::vector<std::vector<T>> grads(nodes.size());
        for (std::size_t l = 0; l < nodes.size(); ++l) {
          if (nodes[l]->requires_grad) grads[l].assign(nodes[l]->data.size(), T(0));
        }
        for (std::size_t i = 0; i < all.size(); ++i) {
          const RoiTaps& rt = all[i];
          if (grads[rt.level].empty()) continue;
          T* dst = grads[rt.level].data() + rt.base;
          const T* g = self.grad.data() + i * c * cells;
          for (Index ch = 0; ch < c; ++ch) {
            T* plane = dst + ch * rt.plane;
            const T* go = g + ch * cells;
            for (const Tap& t : rt.taps) plane[t.offset] += static_cast<T>(t.weight) * go[t.cell];
          }
        }
        for (std::size_t l = 0; l < nodes.size(); ++l) {
          if (!grads[l].empty()) nodes[l]->accumulate(grads[l]);
        }
      });
}

}  // namespace

void LevelAssignment::validate() const {
  if (!(k_min <= k0 && k0 <= k_max) || k_min < kMinLevel || k_max > kMaxLevel) {
    throw InvalidArgument("level assignment needs k_min <= k0 <= k_max within [2,5]");
  }
  if (!(s0 > 0)) throw InvalidArgument("level assignment needs s0 > 0");
}

int assign_level(const Box& box, const LevelAssignment& a) {
  if (!box.valid() || !(box.area() > 0)) {
    throw DegenerateBox("assign_level: zero-area box");
  }
  const double k = std::floor(a.k0 + std::log2(std::sqrt(box.area()) / a.s0));
  return static_cast<int>(std::clamp(k, double(a.k_min), double(a.k_max)));
}

int refine_level(int level) {
  if (level < kMinLevel || level > kMaxLevel) {
    throw InvalidArgument("refine_level: level " + std::to_string(level) +
                          " outside [2,5]");
  }
  return std::max(level - 1, kMinLevel);
}

template <typename T>
Tensor<T> roi_align(const Tensor<T>& level, std::span<const Roi> rois,
                    double stride, RoiAlignOptions opts) {
  if (level.rank() != 4) {
    throw ShapeError("roi_align: expected [N,C,H,W], got " + shape_string(level.shape()));
  }
  std::vector<int> level_of(rois.size(), 0);
  const double strides[1] = {stride};
  return pool_rois<T>({level}, rois, level_of, strides, opts);
}

template <typename T>
Tensor<T> roi_align(const Tensor<T>& feature, const Box& box, double stride,
                    RoiAlignOptions opts) {
  if (feature.rank() != 3) {
    throw ShapeError("roi_align: expected [C,H,W], got " + shape_string(feature.shape()));
  }
  auto batched = reshape(feature, {1, feature.dim(0), feature.dim(1), feature.dim(2)});
  const Roi roi{0, box};
  auto out = roi_align(batched, std::span<const Roi>(&roi, 1), stride, opts);
  return reshape(out, {feature.dim(0), opts.out, opts.out});
}

template <typename T>
Tensor<T> roi_align(const FeaturePyramid<T>& pyramid, std::span<const Roi> rois,
                    std::span<const int> levels, RoiAlignOptions opts) {
  if (levels.size() != rois.size()) {
    throw ShapeError("roi_align: one level per roi required");
  }
  std::vector<int> level_of(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] < kMinLevel || levels[i] > kMaxLevel) {
      throw InvalidArgument("roi_align: level out of range");
    }
    level_of[i] = levels[i] - kMinLevel;
  }
  std::vector<Tensor<T>> lv(pyramid.levels.begin(), pyramid.levels.end());
  std::vector<double> strides;
  for (int k = kMinLevel; k <= kMaxLevel; ++k) strides.push_back(FeaturePyramid<T>::stride(k));
  return pool_rois<T>(std::move(lv), rois, level_of, strides, opts);
}

#define PBR_INSTANTIATE_ROI(T)                                                       \
  template Tensor<T> roi_align(const Tensor<T>&, std::span<const Roi>, double,       \
                               RoiAlignOptions);                                     \
  template Tensor<T> roi_align(const Tensor<T>&, const Box&, double, RoiAlignOptions); \
  template Tensor<T> roi_align(const FeaturePyramid<T>&, std::span<const Roi>,       \
                               std::span<const int>, RoiAlignOptions);

PBR_INSTANTIATE_ROI(float)
PBR_INSTANTIATE_ROI(double)

}  // namespace pbr

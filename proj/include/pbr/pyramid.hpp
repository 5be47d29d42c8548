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

#include <array>
#include <span>
#include <vector>

#include "pbr/boxgeom.hpp"
#include "pbr/tensor.hpp"

namespace pbr {

inline constexpr int kMinLevel = 2;
inline constexpr int kMaxLevel = 5;
inline constexpr int kNumLevels = kMaxLevel - kMinLevel + 1;

/// Levels L2..L5, each [N, d, H/2^k, W/2^k].
template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, kNumLevels> levels;

  const Tensor<T>& level(int k) const { return levels.at(k - kMinLevel); }
  static double stride(int k) { return static_cast<double>(1 << k); }
  Index channels() const { return levels[0].dim(1); }
};

struct LevelAssignment {
  int k0 = 2;
  double s0 = 32.0;
  int k_min = kMinLevel;
  int k_max = kMaxLevel;

  /// k0=4, s0=224: the usual full-resolution convention.
  static LevelAssignment full_scale() { return {4, 224.0, kMinLevel, kMaxLevel}; }
  void validate() const;
};

/// clamp(floor(k0 + log2(sqrt(w*h) / s0)), k_min, k_max)
int assign_level(const Box& box, const LevelAssignment& a = {});

/// One level finer, staying on L2.
int refine_level(int level);

struct RoiAlignOptions {
  int out = 7;
  int sampling = 2;
};

struct Roi {
  Index batch = 0;
  Box box;
};

/// Bilinear RoI Align of `rois` on one level [N,C,H,W] -> [R,C,out,out].
/// Image coordinates are divided by `stride` with no half-pixel shift;
/// sample (i + (a + 0.5)/s) * bin for a in [0, s); zero padding outside.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& level, std::span<const Roi> rois,
                    double stride, RoiAlignOptions opts = {});

/// Single feature map [C,H,W] and box -> [C,out,out].
template <typename T>
Tensor<T> roi_align(const Tensor<T>& feature, const Box& box, double stride,
                    RoiAlignOptions opts = {});

/// Each roi pooled from `pyramid.level(levels[i])` -> [R,C,out,out].
template <typename T>
Tensor<T> roi_align(const FeaturePyramid<T>& pyramid, std::span<const Roi> rois,
                    std::span<const int> levels, RoiAlignOptions opts = {});

}  // namespace pbr

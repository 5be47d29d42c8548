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

// Synthetic shape-detection scenes and their on-disk format:
//   <dir>/images/NNNNNN.ppm   binary P6
//   <dir>/annotations.json    {"categories": [...], "images": [Annotation...]}

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pbr/boxgeom.hpp"
#include "pbr/rng.hpp"
#include "pbr/tensor.hpp"

namespace pbr {

enum class ShapeKind { kSquare = 0, kCircle, kTriangle, kCross, kRing };
inline constexpr int kNumShapeKinds = 5;
const std::vector<std::string>& category_names();

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved

  Rgb pixel(int x, int y) const;
  /// [3,H,W], normalized to roughly [-2, 2].
  Tensor<float> to_tensor() const;
  friend bool operator==(const Image&, const Image&) = default;
};

struct Object {
  Box bbox;
  int category_id = 0;
  friend bool operator==(const Object&, const Object&) = default;
};

struct Annotation {
  std::string file_name;
  int width = 0, height = 0;
  std::vector<Object> objects;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Scene {
  Image image;
  Annotation annotation;
};

struct SceneSpec {
  int width = 128, height = 128;
  int min_objects = 1, max_objects = 4;
  double min_scale = 16.0, max_scale = 56.0;
  double noise = 0.04;  // uniform +-noise, in [0,1] intensity units
  double max_pair_iou = 0.3;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ShapeInstance {
  ShapeKind kind = ShapeKind::kSquare;
  Box box;
  Rgb color{};
};

/// True if (x, y) lies inside `kind` inscribed in `box`.
bool shape_contains(ShapeKind kind, const Box& box, double x, double y);

/// Anti-aliased (4x4 supersampled) rendering plus additive uniform noise.
Image render_shapes(int width, int height, Rgb background,
                    const std::vector<ShapeInstance>& shapes, double noise, Rng& rng);

Scene generate_scene(const SceneSpec& spec, Rng& rng);

/// Scene `index` of a split, generated from a seed derived from spec.seed.
Scene generate_scene(const SceneSpec& spec, std::uint64_t index);

std::vector<Scene> generate_split(const SceneSpec& spec, std::size_t count);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

struct Dataset {
  std::filesystem::path root;
  std::vector<std::string> categories;
  std::vector<Annotation> annotations;

  Image load_image(std::size_t i) const;
};

void write_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace pbr

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

#include "pbr/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pbr/error.hpp"
#include "pbr/parallel.hpp"

namespace pbr {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSuperSample = 4;
constexpr int kMaxPlacementTries = 100;
constexpr int kMaxSceneAttempts = 16;

double luminance(const std::array<double, 3>& c) {
  return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
}

Rgb to_rgb(const std::array<double, 3>& c) {
  Rgb out{};
  for (int i = 0; i < 3; ++i) {
    out[i] = static_cast<std::uint8_t>(std::clamp(std::lround(c[i] * 255.0), 0L, 255L));
  }
  return out;
}

std::string image_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "images/%06zu.ppm", index);
  return buf;
}

// Single attempt; false when some object could not be placed.
bool try_scene(const SceneSpec& spec, Rng& rng, Scene& scene) {
  std::array<double, 3> bg{};
  const double gray = rng.uniform(0.15, 0.85);
  for (double& v : bg) v = std::clamp(gray + rng.uniform(-0.05, 0.05), 0.0, 1.0);

  const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
  std::vector<ShapeInstance> shapes;
  std::vector<Object> objects;
  for (int n = 0; n < count; ++n) {
    const auto kind = static_cast<ShapeKind>(rng.uniform_int(0, kNumShapeKinds - 1));
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
      const double scale = rng.uniform(spec.min_scale, spec.max_scale);
      const double aspect = kind == ShapeKind::kSquare ? 1.0 : std::exp(rng.uniform(-0.29, 0.29));
      const double w = std::min(scale * std::sqrt(aspect), double(spec.width));
      const double h = std::min(scale / std::sqrt(aspect), double(spec.height));
      const double x1 = rng.uniform(0.0, spec.width - w);
      const double y1 = rng.uniform(0.0, spec.height - h);
      const Box box{x1, y1, x1 + w, y1 + h};
      const bool clear = std::none_of(objects.begin(), objects.end(), [&](const Object& o) {
        const double inter_w = std::min(o.bbox.x2, box.x2) - std::max(o.bbox.x1, box.x1);
        const double inter_h = std::min(o.bbox.y2, box.y2) - std::max(o.bbox.y1, box.y1);
        const double inter = inter_w > 0 && inter_h > 0 ? inter_w * inter_h : 0.0;
        // Also reject nesting, which IoU alone lets through.
        return iou(o.bbox, box) > spec.max_pair_iou ||
               inter > 0.5 * std::min(o.bbox.area(), box.area());
      });
      if (!clear) continue;
      std::array<double, 3> fg{};
      do {
        for (double& v : fg) v = rng.uniform();
      } while (std::abs(luminance(fg) - luminance(bg)) < 0.3);
      shapes.push_back({kind, box, to_rgb(fg)});
      objects.push_back({box, static_cast<int>(kind)});
      placed = true;
    }
    if (!placed) return false;
  }
  scene.image = render_shapes(spec.width, spec.height, to_rgb(bg), shapes, spec.noise, rng);
  scene.annotation = {"", spec.width, spec.height, std::move(objects)};
  return true;
}

json require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) {
    throw ParseError(path + "/" + key, "missing field");
  }
  return j.at(key);
}

std::string line_and_offset(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  const auto line = 1 + std::count(text.begin(), text.begin() + byte, '\n');
  return "line " + std::to_string(line) + ", offset " + std::to_string(byte);
}

}  // namespace

const std::vector<std::string>& category_names() {
  static const std::vector<std::string> names = {"square", "circle", "triangle", "cross",
                                                 "ring"};
  return names;
}

Rgb Image::pixel(int x, int y) const {
  const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

Tensor<float> Image::to_tensor() const {
  Tensor<float> t({3, height, width});
  auto d = t.data();
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  for (std::size_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      d[c * plane + p] = (rgb[p * 3 + c] / 255.0f - 0.5f) * 4.0f;
    }
  }
  return t;
}

void SceneSpec::validate() const {
  if (width < 1 || height < 1) throw InvalidArgument("scene size must be positive");
  if (min_objects < 0 || max_objects < min_objects) {
    throw InvalidArgument("object count range is empty");
  }
  if (!(min_scale > 1 && max_scale >= min_scale) ||
      max_scale > std::min(width, height)) {
    throw InvalidArgument("scale range must satisfy 1 < min <= max <= image size");
  }
  if (noise < 0 || noise > 1) throw InvalidArgument("noise amplitude must lie in [0,1]");
}

bool shape_contains(ShapeKind kind, const Box& box, double x, double y) {
  const double u = (x - box.x1) / box.width();
  const double v = (y - box.y1) / box.height();
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  const double du = 2 * u - 1, dv = 2 * v - 1;
  switch (kind) {
    case ShapeKind::kSquare: return true;
    case ShapeKind::kCircle: return du * du + dv * dv <= 1.0;
    case ShapeKind::kTriangle: return std::abs(u - 0.5) <= 0.5 * v;
    case ShapeKind::kCross: return std::abs(du) <= 1.0 / 3 || std::abs(dv) <= 1.0 / 3;
    case ShapeKind::kRing: {
      const double r2 = du * du + dv * dv;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
  }
  return false;
}

Image render_shapes(int width, int height, Rgb background,
                    const std::vector<ShapeInstance>& shapes, double noise, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(width) * height;
  std::vector<double> canvas(n * 3);
  for (std::size_t p = 0; p < n; ++p) {
    for (int c = 0; c < 3; ++c) canvas[p * 3 + c] = background[c] / 255.0;
  }
  for (const auto& s : shapes) {
    const int x0 = std::max(0, static_cast<int>(std::floor(s.box.x1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(s.box.y1)));
    const int x1 = std::min(width, static_cast<int>(std::ceil(s.box.x2)));
    const int y1 = std::min(height, static_cast<int>(std::ceil(s.box.y2)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        int hits = 0;
        for (int i = 0; i < kSuperSample; ++i) {
          for (int j = 0; j < kSuperSample; ++j) {
            hits += shape_contains(s.kind, s.box, x + (j + 0.5) / kSuperSample,
                                   y + (i + 0.5) / kSuperSample);
          }
        }
        if (hits == 0) continue;
        const double cov = double(hits) / (kSuperSample * kSuperSample);
        double* px = &canvas[(static_cast<std::size_t>(y) * width + x) * 3];
        for (int c = 0; c < 3; ++c) px[c] = px[c] * (1 - cov) + s.color[c] / 255.0 * cov;
      }
    }
  }
  Image img{width, height, std::vector<std::uint8_t>(n * 3)};
  for (std::size_t i = 0; i < n * 3; ++i) {
    double v = canvas[i];
    if (noise > 0) v += rng.uniform(-noise, noise);
    img.rgb[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
  }
  return img;
}

Scene generate_scene(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  const std::uint64_t base = rng.next_u64();
  Scene scene;
  for (int attempt = 0; attempt < kMaxSceneAttempts; ++attempt) {
    Rng sub(derive_seed(base, attempt));
    if (try_scene(spec, sub, scene)) return scene;
  }
  throw Error("generate_scene: could not place objects after " +
              std::to_string(kMaxSceneAttempts) + " attempts; scale range too large?");
}

Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  Rng rng(derive_seed(spec.seed, index));
  return generate_scene(spec, rng);
}

std::vector<Scene> generate_split(const SceneSpec& spec, std::size_t count) {
  spec.validate();
  std::vector<Scene> scenes(count);
  parallel_for(count, [&](std::size_t i) {
    scenes[i] = generate_scene(spec, static_cast<std::uint64_t>(i));
    scenes[i].annotation.file_name = image_name(i);
  });
  return scenes;
}

void write_ppm(const fs::path& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(image.rgb.data()),
          static_cast<std::streamsize>(image.rgb.size()));
  if (!f) throw IoError("failed to write " + path.string());
}

Image read_ppm(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (!f || magic != "P6" || w <= 0 || h <= 0 || maxval != 255) {
    throw IoError(path.string() + ": not an 8-bit binary PPM");
  }
  f.get();  // single whitespace before the payload
  Image img{w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw IoError(path.string() + ": truncated pixel data (" + std::to_string(f.gcount()) +
                  " of " + std::to_string(img.rgb.size()) + " bytes)");
  }
  return img;
}

Image Dataset::load_image(std::size_t i) const {
  return read_ppm(root / annotations.at(i).file_name);
}

void write_dataset(const fs::path& dir, const std::vector<Scene>& scenes) {
  fs::create_directories(dir / "images");
  json images = json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& s = scenes[i];
    const std::string name = s.annotation.file_name.empty() ? image_name(i)
                                                           : s.annotation.file_name;
    write_ppm(dir / name, s.image);
    json objects = json::array();
    for (const auto& o : s.annotation.objects) {
      objects.push_back({{"bbox", {o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2}},
                         {"category_id", o.category_id}});
    }
    images.push_back({{"file_name", name},
                      {"width", s.image.width},
                      {"height", s.image.height},
                      {"objects", std::move(objects)}});
  }
  const json doc = {{"categories", category_names()}, {"images", std::move(images)}};
  std::ofstream f(dir / "annotations.json");
  f << doc.dump(1) << "\n";
  if (!f) throw IoError("failed to write " + (dir / "annotations.json").string());
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path path = dir / "annotations.json";
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  const std::string text = buf.str();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + " " + line_and_offset(text, e.byte), e.what());
  }

  Dataset ds;
  ds.root = dir;
  try {
    ds.categories = require(doc, "categories", "").get<std::vector<std::string>>();
    const json images = require(doc, "images", "");
    if (!images.is_array()) throw ParseError("/images", "expected a list");
    const int num_categories = static_cast<int>(ds.categories.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const std::string p = "/images/" + std::to_string(i);
      Annotation a;
      a.file_name = require(images[i], "file_name", p).get<std::string>();
      a.width = require(images[i], "width", p).get<int>();
      a.height = require(images[i], "height", p).get<int>();
      const json objects = require(images[i], "objects", p);
      for (std::size_t j = 0; j < objects.size(); ++j) {
        const std::string op = p + "/objects/" + std::to_string(j);
        const auto bbox = require(objects[j], "bbox", op).get<std::vector<double>>();
        if (bbox.size() != 4) throw ParseError(op + "/bbox", "expected 4 numbers");
        Object o{{bbox[0], bbox[1], bbox[2], bbox[3]},
                 require(objects[j], "category_id", op).get<int>()};
        if (!o.bbox.valid() || o.bbox.x1 < 0 || o.bbox.y1 < 0 || o.bbox.x2 > a.width ||
            o.bbox.y2 > a.height) {
          throw ParseError(op + "/bbox", "box must be valid and inside the image");
        }
        if (o.category_id < 0 || o.category_id >= num_categories) {
          throw ParseError(op + "/category_id", "out of range");
        }
        a.objects.push_back(o);
      }
      ds.annotations.push_back(std::move(a));
    }
  } catch (const json::exception& e) {
    throw ParseError(path.string(), e.what());
  }
  return ds;
}

}  // namespace pbr

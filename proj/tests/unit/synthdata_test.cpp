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


#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "pbr/error.hpp"
#include "pbr/synthdata.hpp"

using namespace pbr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("pbr_synth_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("scene spec validation") {
  SceneSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.min_objects = 3;
  spec.max_objects = 2;
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
  spec = {};
  spec.max_scale = 500;
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
  spec = {};
  spec.noise = -0.1;
  CHECK_THROWS_AS(spec.validate(), InvalidArgument);
}

TEST_CASE("single-object scenes") {
  SceneSpec spec;
  spec.min_objects = spec.max_objects = 1;
  for (std::uint64_t i = 0; i < 50; ++i) {
    CHECK(generate_scene(spec, i).annotation.objects.size() == 1);
  }
}

TEST_CASE("noise-free black square covers exactly its box") {
  Rng rng(81);
  const Box box{10, 12, 30, 40};
  const Image img = render_shapes(64, 64, {255, 255, 255}, {{ShapeKind::kSquare, box, {0, 0, 0}}},
                                  0.0, rng);
  int x1 = 64, y1 = 64, x2 = 0, y2 = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const Rgb p = img.pixel(x, y);
      if (p[0] == 255 && p[1] == 255 && p[2] == 255) continue;
      CHECK(p == Rgb{0, 0, 0});
      x1 = std::min(x1, x);
      y1 = std::min(y1, y);
      x2 = std::max(x2, x + 1);
      y2 = std::max(y2, y + 1);
    }
  }
  CHECK(Box{double(x1), double(y1), double(x2), double(y2)} == box);
}

TEST_CASE("shape membership") {
  const Box b{0, 0, 10, 10};
  for (int k = 0; k < kNumShapeKinds; ++k) {
    CHECK_FALSE(shape_contains(static_cast<ShapeKind>(k), b, -0.1, 5));
    CHECK_FALSE(shape_contains(static_cast<ShapeKind>(k), b, 5, 10.1));
  }
  CHECK(shape_contains(ShapeKind::kCircle, b, 5, 5));
  CHECK_FALSE(shape_contains(ShapeKind::kCircle, b, 0.5, 0.5));
  CHECK_FALSE(shape_contains(ShapeKind::kRing, b, 5, 5));
  CHECK(shape_contains(ShapeKind::kRing, b, 5, 0.5));
  CHECK(shape_contains(ShapeKind::kCross, b, 5, 0.5));
  CHECK_FALSE(shape_contains(ShapeKind::kCross, b, 0.5, 0.5));
  CHECK(shape_contains(ShapeKind::kTriangle, b, 5, 9.5));
  CHECK_FALSE(shape_contains(ShapeKind::kTriangle, b, 0.5, 1));
  CHECK(category_names().size() == kNumShapeKinds);
  CHECK(category_names()[0] == "square");
}

TEST_CASE("scenes respect placement rules") {
  SceneSpec spec;
  for (const Scene& s : generate_split(spec, 200)) {
    const auto& objs = s.annotation.objects;
    CHECK(objs.size() >= 1);
    CHECK(objs.size() <= 4);
    CHECK(s.image.width == 128);
    CHECK(s.image.rgb.size() == 128u * 128u * 3u);
    for (std::size_t i = 0; i < objs.size(); ++i) {
      CHECK(objs[i].bbox.valid());
      CHECK(objs[i].bbox.x1 >= 0);
      CHECK(objs[i].bbox.y1 >= 0);
      CHECK(objs[i].bbox.x2 <= 128);
      CHECK(objs[i].bbox.y2 <= 128);
      CHECK(objs[i].category_id >= 0);
      CHECK(objs[i].category_id < kNumShapeKinds);
      for (std::size_t j = i + 1; j < objs.size(); ++j) {
        CHECK(iou(objs[i].bbox, objs[j].bbox) <= spec.max_pair_iou);
      }
    }
  }
}

TEST_CASE("generation is deterministic") {
  SceneSpec spec;
  spec.seed = 5;
  const auto a = generate_split(spec, 20);
  const auto b = generate_split(spec, 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].annotation == b[i].annotation);
  }
  spec.seed = 6;
  CHECK_FALSE(generate_split(spec, 1)[0].image == a[0].image);

  const fs::path d1 = scratch("det1"), d2 = scratch("det2");
  write_dataset(d1, a);
  write_dataset(d2, b);
  CHECK(slurp(d1 / "annotations.json") == slurp(d2 / "annotations.json"));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto name = a[i].annotation.file_name;
    CHECK(slurp(d1 / name) == slurp(d2 / name));
  }
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("dataset round trip") {
  SceneSpec spec;
  spec.seed = 7;
  const auto scenes = generate_split(spec, 10);
  const fs::path dir = scratch("roundtrip");
  write_dataset(dir, scenes);
  CHECK(fs::exists(dir / "images" / "000000.ppm"));
  const Dataset ds = read_dataset(dir);
  REQUIRE(ds.annotations.size() == scenes.size());
  CHECK(ds.categories == category_names());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    CHECK(ds.annotations[i] == scenes[i].annotation);
    CHECK(ds.load_image(i) == scenes[i].image);
  }
  fs::remove_all(dir);
}

TEST_CASE("empty dataset") {
  const fs::path dir = scratch("empty");
  write_dataset(dir, {});
  const Dataset ds = read_dataset(dir);
  CHECK(ds.annotations.empty());
  CHECK(ds.categories == category_names());
  fs::remove_all(dir);
}

TEST_CASE("truncated image is an I/O error") {
  const fs::path dir = scratch("truncated");
  fs::create_directories(dir);
  Image img{4, 4, std::vector<std::uint8_t>(48, 7)};
  write_ppm(dir / "a.ppm", img);
  CHECK(read_ppm(dir / "a.ppm") == img);
  const std::string bytes = slurp(dir / "a.ppm");
  std::ofstream(dir / "b.ppm", std::ios::binary) << bytes.substr(0, bytes.size() - 5);
  CHECK_THROWS_AS(read_ppm(dir / "b.ppm"), IoError);
  std::ofstream(dir / "c.ppm", std::ios::binary) << "P3\n4 4\n255\n";
  CHECK_THROWS_AS(read_ppm(dir / "c.ppm"), IoError);
  CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("malformed annotations are parse errors with a location") {
  const fs::path dir = scratch("malformed");
  fs::create_directories(dir);
  auto write = [&](const std::string& text) { std::ofstream(dir / "annotations.json") << text; };

  write("{\n  \"categories\": [],\n  \"images\": [ 1, \n");
  try {
    read_dataset(dir);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  write(R"({"categories": ["square"], "images": [{"file_name": "x.ppm", "width": 8,
            "height": 8, "objects": [{"bbox": [1, 2, 3], "category_id": 0}]}]})");
  try {
    read_dataset(dir);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.where().find("bbox") != std::string::npos);
  }

  write(R"({"categories": ["square"], "images": [{"file_name": "x.ppm", "width": 8,
            "height": 8, "objects": [{"bbox": [1, 2, 3, 4], "category_id": 3}]}]})");
  CHECK_THROWS_AS(read_dataset(dir), ParseError);
  write(R"({"categories": [], "images": [{"width": 8}]})");
  CHECK_THROWS_AS(read_dataset(dir), ParseError);
  CHECK_THROWS_AS(read_dataset(dir / "nowhere"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("categories and scales are covered") {
  SceneSpec spec;
  spec.seed = 9;
  std::array<int, kNumShapeKinds> per_category{};
  std::array<int, 8> per_scale{};
  double lo = 1e9, hi = 0;
  for (const Scene& s : generate_split(spec, 1000)) {
    for (const auto& o : s.annotation.objects) {
      ++per_category[o.category_id];
      const double scale = std::sqrt(o.bbox.area());
      lo = std::min(lo, scale);
      hi = std::max(hi, scale);
      const double f = (scale - spec.min_scale) / (spec.max_scale - spec.min_scale);
      ++per_scale[std::clamp(static_cast<int>(f * 8), 0, 7)];
    }
  }
  for (int n : per_category) CHECK(n > 0);
  for (int n : per_scale) CHECK(n > 0);
  CHECK(lo >= spec.min_scale - 1e-9);
  CHECK(hi <= spec.max_scale + 1e-9);
  CHECK(lo < spec.min_scale + 2);
  CHECK(hi > spec.max_scale - 2);
}

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

#include "pbr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "pbr/error.hpp"

namespace pbr {
namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const fs::path& dir, const ParameterSet<float>& params) {
  fs::create_directories(dir);
  json manifest = json::array();
  std::vector<unsigned char> payload;
  payload.reserve(params.total_values() * 4);
  for (const auto& p : params.items()) {
    manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"dtype", "f32"}});
    for (float v : p.value.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) payload.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  }
  std::ofstream mf(dir / "manifest.json");
  mf << manifest.dump(2) << "\n";
  std::ofstream wf(dir / "weights.bin", std::ios::binary);
  wf.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size()));
  if (!mf || !wf) throw IoError("failed to write checkpoint to " + dir.string());
}

std::vector<NamedArray> load_checkpoint(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw ParseError((dir / "manifest.json").string() + " offset " +
                         std::to_string(e.byte),
                     e.what());
  }
  if (!manifest.is_array()) {
    throw ParseError("manifest.json", "top level must be a list");
  }
  std::vector<NamedArray> arrays;
  std::size_t total = 0;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const json& e = manifest[i];
    const std::string where = "manifest.json/" + std::to_string(i);
    if (!e.is_object() || !e.contains("name") || !e.contains("shape")) {
      throw ParseError(where, "entry needs name and shape");
    }
    if (e.value("dtype", std::string("f32")) != "f32") {
      throw ParseError(where + "/dtype", "only f32 is supported");
    }
    NamedArray a;
    a.name = e["name"].get<std::string>();
    a.shape = e["shape"].get<Shape>();
    total += shape_numel(a.shape);
    arrays.push_back(std::move(a));
  }

  std::ifstream wf(dir / "weights.bin", std::ios::binary);
  if (!wf) throw IoError("cannot open " + (dir / "weights.bin").string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(wf)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() != total * 4) {
    throw IoError("weights.bin holds " + std::to_string(bytes.size()) +
                  " bytes, manifest needs " + std::to_string(total * 4));
  }
  std::size_t off = 0;
  for (auto& a : arrays) {
    a.values.resize(shape_numel(a.shape));
    for (float& v : a.values) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[off + b]) << (8 * b);
      v = std::bit_cast<float>(bits);
      off += 4;
    }
  }
  return arrays;
}

void apply_checkpoint(const std::vector<NamedArray>& arrays,
                      ParameterSet<float>& params) {
  auto& items = params.items();
  if (arrays.size() != items.size()) {
    throw InvalidArgument("incompatible checkpoint: " + std::to_string(arrays.size()) +
                          " tensors, model expects " + std::to_string(items.size()));
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (arrays[i].name != items[i].name || arrays[i].shape != items[i].value.shape()) {
      throw InvalidArgument("incompatible checkpoint: entry " + std::to_string(i) +
                            " is " + arrays[i].name + shape_string(arrays[i].shape) +
                            ", model expects " + items[i].name +
                            shape_string(items[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(arrays[i].values.begin(), arrays[i].values.end(),
              items[i].value.data().begin());
    std::fill(items[i].momentum.begin(), items[i].momentum.end(), 0.0f);
  }
}

}  // namespace pbr

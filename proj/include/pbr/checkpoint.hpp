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

// Checkpoint directory layout:
//   manifest.json  ordered list of {"name", "shape", "dtype": "f32"}
//   weights.bin    little-endian float32 payload, concatenated in manifest order

#include <filesystem>
#include <string>
#include <vector>

#include "pbr/optim.hpp"

namespace pbr {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void save_checkpoint(const std::filesystem::path& dir,
                     const ParameterSet<float>& params);

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& dir);

/// Copies checkpoint values into `params`; names, order and shapes must
/// match exactly.
void apply_checkpoint(const std::vector<NamedArray>& arrays,
                      ParameterSet<float>& params);

}  // namespace pbr

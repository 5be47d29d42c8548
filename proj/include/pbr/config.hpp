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

// Run configuration as one strict JSON document. Every field is optional
// and defaults to the shipped value; unknown keys and out-of-range values
// are rejected with the offending JSON path (e.g. "$.optim.lr").

#include <filesystem>
#include <string>

#include <json.hpp>

#include "pbr/detector.hpp"

namespace pbr {

struct RunConfig {
  DetectorConfig detector;
  std::filesystem::path train_data = "data/train";
  std::filesystem::path val_data = "data/val";
};

/// Relative dataset paths are resolved against `base`.
RunConfig parse_run_config(const nlohmann::ordered_json& doc,
                           const std::filesystem::path& base = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Complete document including defaults; parse(to_json(c)) == c.
nlohmann::ordered_json to_json(const RunConfig& config);
nlohmann::ordered_json to_json(const DetectorConfig& config);
DetectorConfig parse_detector_config(const nlohmann::ordered_json& doc);

nlohmann::ordered_json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& doc);

}  // namespace pbr

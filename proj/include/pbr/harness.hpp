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

// The `pbr` command line: synth, train, eval, infer, report, selftest.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "pbr/detector.hpp"

namespace pbr {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitFailure = 2;

struct HarnessHooks {
  /// Runs the oracle/invariant suite; returns an exit code.
  std::function<int(std::ostream&)> selftest;
};

int run(const std::vector<std::string>& args, const HarnessHooks& hooks = {});

/// Accepts a checkpoint directory or a training output directory holding
/// `checkpoint/`.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);
/// Rebuilds the detector from checkpoint/config.json and loads weights.
Detector load_detector(const std::filesystem::path& checkpoint);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// 24-bit uncompressed BMP.
std::string encode_bmp(const Image& image);
std::string base64(const std::string& bytes);

/// Image with final boxes (solid) and stage-1 boxes (dashed) for
/// detections scoring at least `min_score`.
std::string detections_svg(const Image& image, const std::vector<Detection>& dets,
                           const std::vector<std::string>& names, double min_score);

}  // namespace pbr

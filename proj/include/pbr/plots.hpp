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

// Self-contained SVG plots. Output is byte-stable for identical input; an
// empty input yields a placeholder with a warning banner.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pbr/detector.hpp"
#include "pbr/evalkit.hpp"

namespace pbr {

std::string stage_iou_svg(const std::optional<EvalReport>& report);
std::string pr_curves_svg(const std::optional<EvalReport>& report);
std::string loss_svg(const std::vector<TrainLogRow>& log);

/// Writes stage_iou.svg, pr_curves.svg and loss.svg into `dir`.
void emit_plots(const std::filesystem::path& dir, const std::optional<EvalReport>& report,
                const std::vector<TrainLogRow>& log);

std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path);

}  // namespace pbr

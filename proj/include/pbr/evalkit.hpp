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

// Greedy detection matching, 101-point interpolated AP and COCO-style
// summaries, including per-stage metrics for multi-stage detections.

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pbr/boxgeom.hpp"
#include "pbr/synthdata.hpp"

namespace pbr {

/// One detection with every stage's box (B_1 .. B_T).
struct Detection {
  std::vector<Box> stage_boxes;
  int category = 0;
  double score = 0;

  const Box& final_box() const { return stage_boxes.back(); }
};

inline constexpr int kNumIouThresholds = 10;  // 0.50:0.05:0.95
inline constexpr int kNumRecallPoints = 101;  // 0.00:0.01:1.00
double iou_threshold(int i);

enum class AreaRange { kAll, kSmall, kMedium, kLarge };
inline constexpr std::array<AreaRange, 4> kAreaRanges = {AreaRange::kAll, AreaRange::kSmall,
                                                         AreaRange::kMedium, AreaRange::kLarge};
/// Inclusive [lo, hi] gt-area bounds in square pixels (cutoffs 32^2 and 96^2).
std::array<double, 2> area_bounds(AreaRange range);

/// For detections sorted by descending score: matched gt index, or -1.
/// Each detection takes the highest-IoU unmatched gt with IoU >= iou_t; the
/// first gt wins ties.
std::vector<int> match_detections(std::span<const Box> dets, std::span<const Box> gts,
                                  double iou_t);

/// Interpolated precision at the 101 recall points for flags in rank order.
std::array<double, kNumRecallPoints> interpolated_precision(const std::vector<bool>& tp_flags,
                                                            int num_gt);

/// Mean interpolated precision. Absent when there are no gts and no
/// detections; 0 when detections exist without gts.
std::optional<double> average_precision(const std::vector<bool>& tp_flags, int num_gt);

struct ImageEval {
  std::vector<ScoredBox> dets;
  std::vector<Object> gts;
};

struct CategoryAp {
  std::string name;
  int num_gt = 0;
  std::optional<double> map, ap50, ap75;
};

struct StageAp {
  double map = 0, ap50 = 0, ap75 = 0;
};

struct StageIouStats {
  std::vector<double> mean_iou;  // per stage; empty when nothing matched
  int matched = 0;
};

struct EvalReport {
  double map = 0, ap50 = 0, ap75 = 0;
  std::optional<double> ap_small, ap_medium, ap_large;
  std::array<double, kNumIouThresholds> threshold_ap{};
  std::vector<CategoryAp> per_category;
  std::array<double, kNumRecallPoints> pr50{}, pr75{};  // category-mean precision
  std::vector<StageAp> stages;
  StageIouStats stage_iou;
  int num_images = 0, num_gts = 0, num_dets = 0;
};

/// AP averaged over present categories, then over the ten thresholds.
/// Categories are [0, names.size()).
EvalReport coco_map(std::span<const ImageEval> images, std::span<const std::string> names);

struct StagedImage {
  std::vector<Detection> dets;
  std::vector<Object> gts;
};

/// Matches final boxes to gts at IoU 0.5 and averages each stage's IoU over
/// the matched pairs.
StageIouStats stage_iou_stats(std::span<const StagedImage> images);

/// Full report: summary metrics on final boxes plus per-stage AP and IoU.
EvalReport evaluate(std::span<const StagedImage> images, std::span<const std::string> names);

void write_report(const std::filesystem::path& dir, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& json_path);

}  // namespace pbr

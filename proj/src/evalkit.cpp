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

#include "pbr/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pbr/error.hpp"

namespace pbr {
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

constexpr double kInfiniteArea = 1e10;

struct Ranked {
  double score;
  bool tp;
};

// Matching with ignore flags: non-ignored gts are preferred, a det matched
// to an ignored gt is itself ignored, and an unmatched det is ignored when
// its own area is outside the range.
struct MatchOutcome {
  std::vector<Ranked> ranked;  // non-ignored dets in input order
  int num_gt = 0;               // non-ignored gts
};

bool outside(double area, const std::array<double, 2>& bounds) {
  return area < bounds[0] || area > bounds[1];
}

MatchOutcome match_with_ignore(std::span<const ScoredBox> dets, std::span<const Box> gts,
                               double iou_t, const std::array<double, 2>& bounds) {
  std::vector<std::size_t> order(gts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<bool> ignored(gts.size());
  for (std::size_t g = 0; g < gts.size(); ++g) ignored[g] = outside(gts[g].area(), bounds);
  std::stable_partition(order.begin(), order.end(), [&](std::size_t g) { return !ignored[g]; });

  MatchOutcome out;
  for (std::size_t g = 0; g < gts.size(); ++g) out.num_gt += ignored[g] ? 0 : 1;
  std::vector<bool> taken(gts.size(), false);
  for (const auto& d : dets) {
    int m = -1;
    double best = 0;
    for (std::size_t g : order) {
      if (taken[g]) continue;
      if (m >= 0 && !ignored[m] && ignored[g]) break;
      const double v = iou(d.box, gts[g]);
      if (v < iou_t || (m >= 0 && v <= best)) continue;
      best = v;
      m = static_cast<int>(g);
    }
    const bool ignore = m >= 0 ? bool(ignored[m]) : outside(d.box.area(), bounds);
    if (m >= 0) taken[m] = true;
    if (!ignore) out.ranked.push_back({d.score, m >= 0});
  }
  return out;
}

std::vector<ScoredBox> sorted_by_score(std::vector<ScoredBox> dets) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  return dets;
}

struct CellResult {
  std::optional<double> ap;
  std::array<double, kNumRecallPoints> precision{};
};

// One (category, threshold, area range) cell accumulated over all images.
CellResult evaluate_cell(const std::vector<std::vector<ScoredBox>>& dets,
                         const std::vector<std::vector<Box>>& gts, double iou_t,
                         const std::array<double, 2>& bounds) {
  std::vector<Ranked> all;
  int num_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    auto m = match_with_ignore(dets[i], gts[i], iou_t, bounds);
    all.insert(all.end(), m.ranked.begin(), m.ranked.end());
    num_gt += m.num_gt;
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<bool> flags(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) flags[i] = all[i].tp;
  CellResult r;
  r.ap = average_precision(flags, num_gt);
  if (r.ap) r.precision = interpolated_precision(flags, num_gt);
  return r;
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::optional<double> optional_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

std::string csv_value(const std::optional<double>& v) {
  if (!v) return "null";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", *v);
  return buf;
}

}  // namespace

double iou_threshold(int i) { return 0.5 + 0.05 * i; }

std::array<double, 2> area_bounds(AreaRange range) {
  switch (range) {
    case AreaRange::kAll: return {0.0, kInfiniteArea};
    case AreaRange::kSmall: return {0.0, 32.0 * 32.0};
    case AreaRange::kMedium: return {32.0 * 32.0, 96.0 * 96.0};
    case AreaRange::kLarge: return {96.0 * 96.0, kInfiniteArea};
  }
  return {0.0, kInfiniteArea};
}

std::vector<int> match_detections(std::span<const Box> dets, std::span<const Box> gts,
                                  double iou_t) {
  std::vector<int> out(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = 0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d], gts[g]);
      if (v < iou_t || (out[d] >= 0 && v <= best)) continue;
      best = v;
      out[d] = static_cast<int>(g);
    }
    if (out[d] >= 0) taken[out[d]] = true;
  }
  return out;
}

std::array<double, kNumRecallPoints> interpolated_precision(const std::vector<bool>& tp_flags,
                                                            int num_gt) {
  std::array<double, kNumRecallPoints> out{};
  if (num_gt <= 0 || tp_flags.empty()) return out;
  const std::size_t n = tp_flags.size();
  std::vector<double> recall(n), precision(n);
  double tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    recall[i] = tp / num_gt;
    precision[i] = tp / static_cast<double>(i + 1);
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  for (int r = 0; r < kNumRecallPoints; ++r) {
    const double target = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), target);
    if (it != recall.end()) out[r] = precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return out;
}

std::optional<double> average_precision(const std::vector<bool>& tp_flags, int num_gt) {
  if (num_gt < 0) throw InvalidArgument("average_precision: num_gt must be >= 0");
  if (num_gt == 0 && tp_flags.empty()) return std::nullopt;
  const auto p = interpolated_precision(tp_flags, num_gt);
  return std::accumulate(p.begin(), p.end(), 0.0) / kNumRecallPoints;
}

EvalReport coco_map(std::span<const ImageEval> images, std::span<const std::string> names) {
  const int k = static_cast<int>(names.size());
  EvalReport report;
  report.num_images = static_cast<int>(images.size());

  // Per-category, per-image sorted dets and gt boxes.
  std::vector<std::vector<std::vector<ScoredBox>>> dets(k);
  std::vector<std::vector<std::vector<Box>>> gts(k);
  for (int c = 0; c < k; ++c) {
    dets[c].resize(images.size());
    gts[c].resize(images.size());
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& d : images[i].dets) {
      if (d.category < 0 || d.category >= k) {
        throw InvalidArgument("coco_map: detection category " + std::to_string(d.category) +
                              " outside the category table");
      }
      dets[d.category][i].push_back(d);
      ++report.num_dets;
    }
    for (const auto& g : images[i].gts) {
      if (g.category_id < 0 || g.category_id >= k) {
        throw InvalidArgument("coco_map: gt category " + std::to_string(g.category_id) +
                              " outside the category table");
      }
      gts[g.category_id][i].push_back(g.bbox);
      ++report.num_gts;
    }
  }
  for (auto& per_image : dets) {
    for (auto& v : per_image) v = sorted_by_score(std::move(v));
  }

  for (AreaRange range : kAreaRanges) {
    const auto bounds = area_bounds(range);
    std::array<std::vector<double>, kNumIouThresholds> present;
    for (int c = 0; c < k; ++c) {
      std::array<std::optional<double>, kNumIouThresholds> cat_ap;
      for (int t = 0; t < kNumIouThresholds; ++t) {
        const CellResult cell = evaluate_cell(dets[c], gts[c], iou_threshold(t), bounds);
        cat_ap[t] = cell.ap;
        if (cell.ap) present[t].push_back(*cell.ap);
        if (range == AreaRange::kAll && cell.ap && (t == 0 || t == 5)) {
          auto& curve = t == 0 ? report.pr50 : report.pr75;
          for (int r = 0; r < kNumRecallPoints; ++r) curve[r] += cell.precision[r];
        }
      }
      if (range == AreaRange::kAll) {
        CategoryAp cat;
        cat.name = names[c];
        for (const auto& per_image : gts[c]) cat.num_gt += static_cast<int>(per_image.size());
        std::vector<double> values;
        for (const auto& v : cat_ap) {
          if (v) values.push_back(*v);
        }
        cat.map = mean_of(values);
        cat.ap50 = cat_ap[0];
        cat.ap75 = cat_ap[5];
        report.per_category.push_back(cat);
      }
    }
    // Ignore semantics can make a category present at some thresholds only;
    // thresholds without any present category do not enter the mean.
    std::vector<double> per_threshold;
    for (int t = 0; t < kNumIouThresholds; ++t) {
      const auto ap = mean_of(present[t]);
      if (!ap) continue;
      per_threshold.push_back(*ap);
      if (range == AreaRange::kAll) report.threshold_ap[t] = *ap;
    }
    const std::optional<double> range_map = mean_of(per_threshold);
    if (range == AreaRange::kAll && !present[0].empty()) {
      for (auto& v : report.pr50) v /= static_cast<double>(present[0].size());
    }
    if (range == AreaRange::kAll && !present[5].empty()) {
      for (auto& v : report.pr75) v /= static_cast<double>(present[5].size());
    }
    switch (range) {
      case AreaRange::kAll: report.map = range_map.value_or(0.0); break;
      case AreaRange::kSmall: report.ap_small = range_map; break;
      case AreaRange::kMedium: report.ap_medium = range_map; break;
      case AreaRange::kLarge: report.ap_large = range_map; break;
    }
  }
  report.ap50 = report.threshold_ap[0];
  report.ap75 = report.threshold_ap[5];
  return report;
}

StageIouStats stage_iou_stats(std::span<const StagedImage> images) {
  StageIouStats stats;
  std::vector<double> sums;
  for (const auto& image : images) {
    std::vector<int> cats;
    for (const auto& d : image.dets) cats.push_back(d.category);
    for (const auto& g : image.gts) cats.push_back(g.category_id);
    std::sort(cats.begin(), cats.end());
    cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
    for (int c : cats) {
      std::vector<const Detection*> dets;
      for (const auto& d : image.dets) {
        if (d.category == c) dets.push_back(&d);
      }
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection* a, const Detection* b) { return a->score > b->score; });
      std::vector<Box> finals, gts;
      for (const auto* d : dets) finals.push_back(d->final_box());
      for (const auto& g : image.gts) {
        if (g.category_id == c) gts.push_back(g.bbox);
      }
      const auto match = match_detections(finals, gts, 0.5);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        if (match[i] < 0) continue;
        const auto& boxes = dets[i]->stage_boxes;
        if (sums.empty()) sums.assign(boxes.size(), 0.0);
        if (boxes.size() != sums.size()) {
          throw InvalidArgument("stage_iou_stats: detections disagree on stage count");
        }
        for (std::size_t t = 0; t < boxes.size(); ++t) sums[t] += iou(boxes[t], gts[match[i]]);
        ++stats.matched;
      }
    }
  }
  for (double s : sums) stats.mean_iou.push_back(s / stats.matched);
  return stats;
}

EvalReport evaluate(std::span<const StagedImage> images, std::span<const std::string> names) {
  std::size_t stages = 0;
  for (const auto& image : images) {
    for (const auto& d : image.dets) {
      if (d.stage_boxes.empty()) throw InvalidArgument("evaluate: detection without boxes");
      stages = std::max(stages, d.stage_boxes.size());
    }
  }
  auto at_stage = [&](std::size_t t) {
    std::vector<ImageEval> out(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      out[i].gts = images[i].gts;
      for (const auto& d : images[i].dets) {
        out[i].dets.push_back({d.stage_boxes[std::min(t, d.stage_boxes.size() - 1)], d.score,
                               d.category});
      }
    }
    return out;
  };
  EvalReport report = coco_map(at_stage(stages == 0 ? 0 : stages - 1), names);
  for (std::size_t t = 0; t < stages; ++t) {
    const EvalReport r = coco_map(at_stage(t), names);
    report.stages.push_back({r.map, r.ap50, r.ap75});
  }
  report.stage_iou = stage_iou_stats(images);
  return report;
}

void write_report(const fs::path& dir, const EvalReport& r) {
  fs::create_directories(dir);
  Json j;
  j["mAP"] = r.map;
  j["AP50"] = r.ap50;
  j["AP75"] = r.ap75;
  j["AP_small"] = optional_json(r.ap_small);
  j["AP_medium"] = optional_json(r.ap_medium);
  j["AP_large"] = optional_json(r.ap_large);
  j["threshold_AP"] = r.threshold_ap;
  j["per_category"] = Json::array();
  for (const auto& c : r.per_category) {
    j["per_category"].push_back({{"name", c.name},
                                 {"num_gt", c.num_gt},
                                 {"mAP", optional_json(c.map)},
                                 {"AP50", optional_json(c.ap50)},
                                 {"AP75", optional_json(c.ap75)}});
  }
  j["stages"] = Json::array();
  for (std::size_t t = 0; t < r.stages.size(); ++t) {
    j["stages"].push_back({{"stage", t + 1},
                           {"mAP", r.stages[t].map},
                           {"AP50", r.stages[t].ap50},
                           {"AP75", r.stages[t].ap75}});
  }
  j["stage_iou"] = {{"mean_iou", r.stage_iou.mean_iou}, {"matched", r.stage_iou.matched}};
  std::vector<double> recall(kNumRecallPoints);
  for (int i = 0; i < kNumRecallPoints; ++i) recall[i] = i / 100.0;
  j["pr_curves"] = {{"recall", recall}, {"iou_0.50", r.pr50}, {"iou_0.75", r.pr75}};
  j["num_images"] = r.num_images;
  j["num_gts"] = r.num_gts;
  j["num_dets"] = r.num_dets;

  std::ofstream json_out(dir / "report.json");
  json_out << j.dump(2) << "\n";
  if (!json_out) throw IoError("failed to write " + (dir / "report.json").string());

  std::ofstream csv(dir / "report.csv");
  csv << "metric,value\n";
  auto row = [&](const std::string& name, std::optional<double> v) {
    csv << name << "," << csv_value(v) << "\n";
  };
  row("mAP", r.map);
  row("AP50", r.ap50);
  row("AP75", r.ap75);
  row("AP_small", r.ap_small);
  row("AP_medium", r.ap_medium);
  row("AP_large", r.ap_large);
  for (const auto& c : r.per_category) {
    row("mAP/" + c.name, c.map);
    row("AP50/" + c.name, c.ap50);
    row("AP75/" + c.name, c.ap75);
  }
  for (std::size_t t = 0; t < r.stages.size(); ++t) {
    const std::string s = "stage" + std::to_string(t + 1);
    row(s + "/mAP", r.stages[t].map);
    row(s + "/AP50", r.stages[t].ap50);
    row(s + "/AP75", r.stages[t].ap75);
  }
  for (std::size_t t = 0; t < r.stage_iou.mean_iou.size(); ++t) {
    row("stage" + std::to_string(t + 1) + "/mean_iou", r.stage_iou.mean_iou[t]);
  }
  row("matched", static_cast<double>(r.stage_iou.matched));
  if (!csv) throw IoError("failed to write " + (dir / "report.csv").string());
}

EvalReport read_report(const fs::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open " + json_path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(json_path.string() + " at byte " + std::to_string(e.byte), e.what());
  }
  EvalReport r;
  try {
    r.map = j.at("mAP").get<double>();
    r.ap50 = j.at("AP50").get<double>();
    r.ap75 = j.at("AP75").get<double>();
    r.ap_small = optional_from(j.at("AP_small"));
    r.ap_medium = optional_from(j.at("AP_medium"));
    r.ap_large = optional_from(j.at("AP_large"));
    r.threshold_ap = j.at("threshold_AP").get<std::array<double, kNumIouThresholds>>();
    for (const auto& c : j.at("per_category")) {
      r.per_category.push_back({c.at("name").get<std::string>(), c.at("num_gt").get<int>(),
                                optional_from(c.at("mAP")), optional_from(c.at("AP50")),
                                optional_from(c.at("AP75"))});
    }
    for (const auto& s : j.at("stages")) {
      r.stages.push_back(
          {s.at("mAP").get<double>(), s.at("AP50").get<double>(), s.at("AP75").get<double>()});
    }
    r.stage_iou.mean_iou = j.at("stage_iou").at("mean_iou").get<std::vector<double>>();
    r.stage_iou.matched = j.at("stage_iou").at("matched").get<int>();
    r.pr50 = j.at("pr_curves").at("iou_0.50").get<std::array<double, kNumRecallPoints>>();
    r.pr75 = j.at("pr_curves").at("iou_0.75").get<std::array<double, kNumRecallPoints>>();
    r.num_images = j.at("num_images").get<int>();
    r.num_gts = j.at("num_gts").get<int>();
    r.num_dets = j.at("num_dets").get<int>();
  } catch (const Json::exception& e) {
    throw ParseError(json_path.string(), e.what());
  }
  return r;
}

}  // namespace pbr

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

#include "pbr/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pbr/error.hpp"

namespace pbr {
namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 64, kRight = 24, kTop = 48, kBottom = 56;
constexpr const char* kPalette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2",
                                    "#edc948"};

std::string num(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

class Svg {
 public:
  explicit Svg(const std::string& title) {
    out_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth)
         << "\" height=\"" << num(kHeight) << "\" viewBox=\"0 0 " << num(kWidth) << " "
         << num(kHeight) << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
         << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    text(kWidth / 2, 24, title, "middle", 16);
  }

  void text(double x, double y, const std::string& s, const char* anchor = "start",
            int size = 12, const char* fill = "#222") {
    out_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" text-anchor=\"" << anchor
         << "\" font-size=\"" << size << "\" fill=\"" << fill << "\">" << escape(s)
         << "</text>\n";
  }

  void rect(double x, double y, double w, double h, const char* fill) {
    out_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w)
         << "\" height=\"" << num(h) << "\" fill=\"" << fill << "\"/>\n";
  }

  void line(double x1, double y1, double x2, double y2, const char* stroke = "#222") {
    out_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2)
         << "\" y2=\"" << num(y2) << "\" stroke=\"" << stroke << "\"/>\n";
  }

  void polyline(const std::vector<std::pair<double, double>>& pts, const char* stroke) {
    out_ << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << stroke << "\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      out_ << (i ? " " : "") << num(pts[i].first) << "," << num(pts[i].second);
    }
    out_ << "\"/>\n";
  }

  std::string finish() {
    out_ << "</svg>\n";
    return out_.str();
  }

 private:
  std::ostringstream out_;
};

// Plot area mapping for y in [lo, hi] and x in [0, 1].
struct Frame {
  double lo, hi;
  double x(double u) const { return kLeft + u * (kWidth - kLeft - kRight); }
  double y(double v) const {
    return kHeight - kBottom - (v - lo) / (hi - lo) * (kHeight - kTop - kBottom);
  }
};

void axes(Svg& svg, const Frame& f, const std::string& xlabel, const std::string& ylabel) {
  svg.line(f.x(0), f.y(f.lo), f.x(1), f.y(f.lo));
  svg.line(f.x(0), f.y(f.lo), f.x(0), f.y(f.hi));
  for (int i = 0; i <= 4; ++i) {
    const double v = f.lo + (f.hi - f.lo) * i / 4.0;
    svg.line(f.x(0) - 4, f.y(v), f.x(0), f.y(v));
    svg.text(f.x(0) - 6, f.y(v) + 4, num(v), "end");
  }
  svg.text((f.x(0) + f.x(1)) / 2, kHeight - 16, xlabel, "middle");
  svg.text(16, kTop - 12, ylabel);
}

std::string placeholder(const std::string& title, const std::string& why) {
  Svg svg(title);
  svg.rect(40, kHeight / 2 - 30, kWidth - 80, 60, "#fff3cd");
  svg.text(kWidth / 2, kHeight / 2 + 5, "WARNING: " + why, "middle", 14, "#856404");
  return svg.finish();
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream out(path, std::ios::binary);
  out << s;
  if (!out) throw IoError("failed to write " + path.string());
}

}  // namespace

std::string stage_iou_svg(const std::optional<EvalReport>& report) {
  const std::string title = "Mean IoU of matched detections per refinement stage";
  if (!report || report->stage_iou.mean_iou.empty()) {
    return placeholder(title, "no matched detections in the report");
  }
  const auto& v = report->stage_iou.mean_iou;
  const double lo = std::max(0.0, std::floor((*std::min_element(v.begin(), v.end()) - 0.05) * 20) / 20);
  const Frame f{lo, 1.0};
  Svg svg(title);
  axes(svg, f, "stage (matched pairs: " + std::to_string(report->stage_iou.matched) + ")",
       "mean IoU");
  const double slot = 1.0 / static_cast<double>(v.size());
  for (std::size_t t = 0; t < v.size(); ++t) {
    const double x0 = f.x(slot * (t + 0.2)), x1 = f.x(slot * (t + 0.8));
    svg.rect(x0, f.y(v[t]), x1 - x0, f.y(lo) - f.y(v[t]), kPalette[t % 6]);
    svg.text((x0 + x1) / 2, f.y(v[t]) - 6, "B" + std::to_string(t + 1) + " " + num(v[t], 4),
             "middle");
  }
  return svg.finish();
}

std::string pr_curves_svg(const std::optional<EvalReport>& report) {
  const std::string title = "Precision-recall (category mean)";
  if (!report || report->num_gts == 0) return placeholder(title, "report has no ground truth");
  const Frame f{0.0, 1.0};
  Svg svg(title);
  axes(svg, f, "recall", "precision");
  const std::pair<const char*, const std::array<double, kNumRecallPoints>*> curves[] = {
      {"IoU 0.50", &report->pr50}, {"IoU 0.75", &report->pr75}};
  for (int c = 0; c < 2; ++c) {
    std::vector<std::pair<double, double>> pts;
    for (int r = 0; r < kNumRecallPoints; ++r) {
      pts.emplace_back(f.x(r / 100.0), f.y((*curves[c].second)[r]));
    }
    svg.polyline(pts, kPalette[c]);
    svg.rect(f.x(0.72), kTop + 8 + 18 * c, 14, 10, kPalette[c]);
    svg.text(f.x(0.72) + 20, kTop + 17 + 18 * c, curves[c].first);
  }
  return svg.finish();
}

std::string loss_svg(const std::vector<TrainLogRow>& log) {
  const std::string title = "Training loss per epoch";
  if (log.empty()) return placeholder(title, "training log is empty");
  struct Series {
    std::string name;
    std::vector<double> v;
  };
  std::vector<Series> series{{"total", {}}, {"cls", {}}, {"box", {}}};
  for (std::size_t t = 0; t < log.front().loss_refine.size(); ++t) {
    series.push_back({"refine" + std::to_string(t + 2), {}});
  }
  for (const auto& row : log) {
    series[0].v.push_back(row.loss_total);
    series[1].v.push_back(row.loss_cls);
    series[2].v.push_back(row.loss_box);
    for (std::size_t t = 0; t + 3 < series.size(); ++t) {
      series[t + 3].v.push_back(t < row.loss_refine.size() ? row.loss_refine[t] : 0.0);
    }
  }
  double hi = 0;
  for (const auto& s : series) {
    for (double x : s.v) {
      if (std::isfinite(x)) hi = std::max(hi, x);
    }
  }
  const Frame f{0.0, hi > 0 ? hi * 1.05 : 1.0};
  Svg svg(title);
  axes(svg, f, "epoch (1.." + std::to_string(log.back().epoch) + ")", "loss");
  const double n = static_cast<double>(log.size());
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < series[s].v.size(); ++i) {
      const double u = n > 1 ? i / (n - 1) : 0.5;
      pts.emplace_back(f.x(u), f.y(std::isfinite(series[s].v[i]) ? series[s].v[i] : f.hi));
    }
    svg.polyline(pts, kPalette[s % 6]);
    svg.rect(f.x(0.8), kTop + 8 + 18 * s, 14, 10, kPalette[s % 6]);
    svg.text(f.x(0.8) + 20, kTop + 17 + 18 * s, series[s].name);
  }
  return svg.finish();
}

void emit_plots(const fs::path& dir, const std::optional<EvalReport>& report,
                const std::vector<TrainLogRow>& log) {
  fs::create_directories(dir);
  write_text(dir / "stage_iou.svg", stage_iou_svg(report));
  write_text(dir / "pr_curves.svg", pr_curves_svg(report));
  write_text(dir / "loss.svg", loss_svg(log));
}

std::vector<TrainLogRow> read_train_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,step,loss_total", 0) != 0) {
    throw ParseError(path.string() + ":1", "unexpected header");
  }
  std::vector<TrainLogRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 10) cells.emplace_back();
    if (cells.size() != 10) {
      throw ParseError(path.string() + ":" + std::to_string(lineno), "expected 10 columns");
    }
    try {
      TrainLogRow r;
      r.epoch = std::stoi(cells[0]);
      r.step = std::stol(cells[1]);
      r.loss_total = std::stod(cells[2]);
      r.loss_cls = std::stod(cells[3]);
      r.loss_box = std::stod(cells[4]);
      for (int i = 5; i <= 6; ++i) {
        if (!cells[i].empty()) r.loss_refine.push_back(std::stod(cells[i]));
      }
      for (int i = 7; i <= 9; ++i) {
        if (!cells[i].empty()) r.miou.push_back(std::stod(cells[i]));
      }
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ParseError(path.string() + ":" + std::to_string(lineno), "malformed number");
    }
  }
  return rows;
}

}  // namespace pbr

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

#include "pbr/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pbr/error.hpp"

namespace pbr {
namespace {

constexpr double kDegenerateEps = 1e-9;
// Largest log-scale step decode_delta will apply (ln(1000/16)).
constexpr double kMaxLogScale = 4.135166556742356;

std::string to_string(const Box& b) {
  return "(" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," +
         std::to_string(b.x2) + "," + std::to_string(b.y2) + ")";
}

void require_valid(const Box& box, const char* what) {
  if (!box.valid()) {
    throw DegenerateBox(std::string(what) + " is not a valid box: " +
                        to_string(box));
  }
}

// Interval [center - extent/2, center + extent/2] slid inside [0, limit].
std::pair<double, double> flank(double center, double extent, double limit,
                                bool& truncated) {
  double lo = center - 0.5 * extent;
  double hi = center + 0.5 * extent;
  truncated = false;
  if (lo < 0) {
    lo = 0;
    hi = extent;
    truncated = true;
  } else if (hi > limit) {
    hi = limit;
    lo = limit - extent;
    truncated = true;
  }
  return {lo, hi};
}

}  // namespace

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
         std::isfinite(y2) && x2 > x1 && y2 > y1;
}

const char* side_name(Side side) {
  switch (side) {
    case Side::kLeft: return "left";
    case Side::kRight: return "right";
    case Side::kUp: return "up";
    case Side::kBottom: return "bottom";
  }
  return "?";
}

const Box& BoundaryAreas::area(Side side) const {
  switch (side) {
    case Side::kLeft: return left;
    case Side::kRight: return right;
    case Side::kUp: return up;
    case Side::kBottom: return bottom;
  }
  return left;
}

double BoundaryAreas::center_line(Side side) const {
  switch (side) {
    case Side::kLeft: return m_l;
    case Side::kRight: return m_r;
    case Side::kUp: return m_u;
    case Side::kBottom: return m_b;
  }
  return m_l;
}

double& Sigma::operator[](Side side) {
  switch (side) {
    case Side::kLeft: return l;
    case Side::kRight: return r;
    case Side::kUp: return u;
    case Side::kBottom: return b;
  }
  return l;
}

double Sigma::operator[](Side side) const {
  return const_cast<Sigma&>(*this)[side];
}

double shrink_factor(int t) {
  if (t < 1) {
    throw InvalidArgument("shrink_factor: stage index must be >= 1, got " +
                          std::to_string(t));
  }
  return std::ldexp(1.0, -t);
}

double RefineConfig::shrink(int t) const {
  if (schedule.empty()) return shrink_factor(t);
  if (t < 1 || t > static_cast<int>(schedule.size())) {
    throw InvalidArgument("RefineConfig: no shrink factor for stage " +
                          std::to_string(t));
  }
  return schedule[t - 1];
}

void RefineConfig::validate() const {
  if (num_stages < 1) throw InvalidArgument("num_stages must be >= 1");
  if (clamp && !(*clamp > 0)) throw InvalidArgument("clamp q must be > 0");
  if (!(side_norm > 0)) throw InvalidArgument("side_norm must be > 0");
  if (!schedule.empty()) {
    if (static_cast<int>(schedule.size()) != num_stages - 1) {
      throw InvalidArgument("schedule length must equal num_stages - 1");
    }
    for (double c : schedule) {
      if (!(c > 0 && c <= 1)) {
        throw InvalidArgument("schedule entries must lie in (0, 1]");
      }
    }
  }
}

BoundaryAreas boundary_areas(const Box& box, double c, double img_w,
                             double img_h) {
  require_valid(box, "boundary_areas input");
  if (!(c > 0 && c <= 1)) {
    throw InvalidArgument("boundary_areas: c must lie in (0, 1], got " +
                          std::to_string(c));
  }
  constexpr double kSlack = 1e-6;
  if (box.x1 < -kSlack || box.y1 < -kSlack || box.x2 > img_w + kSlack ||
      box.y2 > img_h + kSlack) {
    throw InvalidArgument("boundary_areas: box " + to_string(box) +
                          " lies outside the image");
  }
  const double cw = c * box.width();
  const double ch = c * box.height();
  if (cw <= kDegenerateEps || ch <= kDegenerateEps) {
    throw DegenerateBox("boundary_areas: degenerate area for box " +
                        to_string(box));
  }

  BoundaryAreas out;
  out.img_w = img_w;
  out.img_h = img_h;
  auto [l1, l2] = flank(box.x1, cw, img_w, out.truncated[0]);
  auto [r1, r2] = flank(box.x2, cw, img_w, out.truncated[1]);
  auto [u1, u2] = flank(box.y1, ch, img_h, out.truncated[2]);
  auto [b1, b2] = flank(box.y2, ch, img_h, out.truncated[3]);
  out.left = {l1, box.y1, l2, box.y2};
  out.right = {r1, box.y1, r2, box.y2};
  out.up = {box.x1, u1, box.x2, u2};
  out.bottom = {box.x1, b1, box.x2, b2};
  // Unclipped flanks keep the source side exactly rather than the rounded
  // midpoint of the flank.
  out.m_l = out.truncated[0] ? 0.5 * (l1 + l2) : box.x1;
  out.m_r = out.truncated[1] ? 0.5 * (r1 + r2) : box.x2;
  out.m_u = out.truncated[2] ? 0.5 * (u1 + u2) : box.y1;
  out.m_b = out.truncated[3] ? 0.5 * (b1 + b2) : box.y2;
  return out;
}

Sigma encode_sigma(const BoundaryAreas& areas, const Box& box, double c,
                   const Box& target) {
  const double cw = c * box.width();
  const double ch = c * box.height();
  if (!(cw > kDegenerateEps) || !(ch > kDegenerateEps)) {
    throw DegenerateBox("encode_sigma: degenerate box " + to_string(box));
  }
  return {(target.x1 - areas.m_l) / cw, (target.x2 - areas.m_r) / cw,
          (target.y1 - areas.m_u) / ch, (target.y2 - areas.m_b) / ch};
}

ClampedSigma clamp_sigma(const Sigma& sigma, double q) {
  ClampedSigma out{sigma, {}};
  for (Side s : kSides) {
    const double v = sigma[s];
    const double clamped = std::clamp(v, -q, q);
    out.sigma[s] = clamped;
    out.clipped[static_cast<int>(s)] = clamped != v;
  }
  return out;
}

DecodedBox decode_box(const BoundaryAreas& areas, const Box& box, double c,
                      const Sigma& sigma) {
  const double cw = c * box.width();
  const double ch = c * box.height();
  double x1 = areas.m_l + cw * sigma.l;
  double x2 = areas.m_r + cw * sigma.r;
  double y1 = areas.m_u + ch * sigma.u;
  double y2 = areas.m_b + ch * sigma.b;

  DecodedBox out;
  if (x1 > x2) {
    std::swap(x1, x2);
    out.reordered = true;
  }
  if (y1 > y2) {
    std::swap(y1, y2);
    out.reordered = true;
  }
  const ClippedBox clipped = clip_to_image({x1, y1, x2, y2}, areas.img_w,
                                           areas.img_h);
  out.box = clipped.box;
  out.clipped = !(out.box == Box{x1, y1, x2, y2});
  if (clipped.degenerate) {
    throw DegenerateBox("decode_box: decoded box " +
                        to_string(Box{x1, y1, x2, y2}) + " is degenerate");
  }
  return out;
}

Delta encode_delta(const Box& proposal, const Box& target, DeltaNorm norm) {
  require_valid(proposal, "encode_delta proposal");
  require_valid(target, "encode_delta target");
  if (!(norm.xy > 0) || !(norm.wh > 0)) {
    throw InvalidArgument("encode_delta: normalization factors must be > 0");
  }
  const double w = proposal.width(), h = proposal.height();
  return {(target.cx() - proposal.cx()) / w / norm.xy,
          (target.cy() - proposal.cy()) / h / norm.xy,
          std::log(target.width() / w) / norm.wh,
          std::log(target.height() / h) / norm.wh};
}

Box decode_delta(const Box& proposal, const Delta& delta, DeltaNorm norm) {
  require_valid(proposal, "decode_delta proposal");
  const double w = proposal.width(), h = proposal.height();
  const double cx = proposal.cx() + delta[0] * norm.xy * w;
  const double cy = proposal.cy() + delta[1] * norm.xy * h;
  const double dw = std::clamp(delta[2] * norm.wh, -kMaxLogScale, kMaxLogScale);
  const double dh = std::clamp(delta[3] * norm.wh, -kMaxLogScale, kMaxLogScale);
  const double nw = w * std::exp(dw), nh = h * std::exp(dh);
  return {cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<std::size_t> nms_indices(const std::vector<ScoredBox>& detections,
                                     double iou_thresh) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const ScoredBox& cand = detections[idx];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return detections[k].category == cand.category &&
             iou(detections[k].box, cand.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

std::vector<ScoredBox> nms(const std::vector<ScoredBox>& detections,
                           double iou_thresh) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(detections, iou_thresh)) out.push_back(detections[i]);
  return out;
}

ClippedBox clip_to_image(const Box& box, double img_w, double img_h) {
  ClippedBox out;
  out.box = {std::clamp(box.x1, 0.0, img_w), std::clamp(box.y1, 0.0, img_h),
             std::clamp(box.x2, 0.0, img_w), std::clamp(box.y2, 0.0, img_h)};
  out.degenerate = !(out.box.width() > kDegenerateEps) ||
                   !(out.box.height() > kDegenerateEps);
  return out;
}

}  // namespace pbr

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

// Axis-aligned boxes, IoU/NMS, the stage-1 delta transform and the
// boundary-area parameterization used by the refinement stages.
//
// All coordinates are continuous pixel coordinates in double precision.

#include <array>
#include <optional>
#include <vector>

namespace pbr {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const;

  friend bool operator==(const Box&, const Box&) = default;
};

enum class Side { kLeft = 0, kRight = 1, kUp = 2, kBottom = 3 };
inline constexpr std::array<Side, 4> kSides = {Side::kLeft, Side::kRight,
                                               Side::kUp, Side::kBottom};
const char* side_name(Side side);

/// The four flank regions of a box plus the realized center line of each
/// region along its normal axis (x for left/right, y for up/bottom).
struct BoundaryAreas {
  Box left, right, up, bottom;
  double m_l = 0, m_r = 0, m_u = 0, m_b = 0;
  double img_w = 0, img_h = 0;
  std::array<bool, 4> truncated{};

  const Box& area(Side side) const;
  double center_line(Side side) const;
};

/// Relative side displacements in units of c*w (left/right) or c*h (up/bottom).
struct Sigma {
  double l = 0, r = 0, u = 0, b = 0;

  double& operator[](Side side);
  double operator[](Side side) const;
  friend bool operator==(const Sigma&, const Sigma&) = default;
};

struct ClampedSigma {
  Sigma sigma;
  std::array<bool, 4> clipped{};
};

struct DecodedBox {
  Box box;
  bool reordered = false;
  bool clipped = false;
};

struct ClippedBox {
  Box box;
  bool degenerate = false;
};

struct RefineConfig {
  int num_stages = 3;
  /// Clamp bound q; std::nullopt disables clamping.
  std::optional<double> clamp = 0.5;
  /// c for refinement stage t=1..T-1; empty means the default 1/2^t.
  std::vector<double> schedule;
  double side_norm = 0.2;

  /// Shrink factor used when refining B_t into B_{t+1}.
  double shrink(int t) const;
  /// Throws InvalidArgument on violated invariants.
  void validate() const;
};

/// c_{t+1} = 1 / 2^t.
double shrink_factor(int t);

BoundaryAreas boundary_areas(const Box& box, double c, double img_w,
                             double img_h);

Sigma encode_sigma(const BoundaryAreas& areas, const Box& box, double c,
                   const Box& target);

ClampedSigma clamp_sigma(const Sigma& sigma, double q);

/// Inverse of encode_sigma. Inverted sides are swapped, then the result is
/// clipped to the image recorded in `areas`.
DecodedBox decode_box(const BoundaryAreas& areas, const Box& box, double c,
                      const Sigma& sigma);

struct DeltaNorm {
  double xy = 0.1;
  double wh = 0.2;
};
using Delta = std::array<double, 4>;

Delta encode_delta(const Box& proposal, const Box& target, DeltaNorm norm = {});
Box decode_delta(const Box& proposal, const Delta& delta, DeltaNorm norm = {});

double iou(const Box& a, const Box& b);

struct ScoredBox {
  Box box;
  double score = 0;
  int category = 0;
};

/// Greedy per-category suppression. Output is sorted by descending score;
/// ties keep input order.
std::vector<ScoredBox> nms(const std::vector<ScoredBox>& detections,
                           double iou_thresh);
/// Indices into `detections` of the survivors, in output order.
std::vector<std::size_t> nms_indices(const std::vector<ScoredBox>& detections,
                                     double iou_thresh);

ClippedBox clip_to_image(const Box& box, double img_w, double img_h);

}  // namespace pbr

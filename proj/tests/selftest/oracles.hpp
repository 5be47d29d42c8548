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

// Reference implementations written straight from the definitions. They
// share no code with the library paths they check.

#include <optional>
#include <span>
#include <vector>

#include "pbr/bpn.hpp"
#include "pbr/evalkit.hpp"

namespace pbr::selftest {

/// Bilinear sample of an h x w plane at (y, x); taps outside read zero.
double bilinear(std::span<const double> plane, int h, int w, double y, double x);

/// [c, out, out] pooled directly from a [c, h, w] map.
std::vector<double> roi_align_direct(std::span<const double> map, int c, int h, int w,
                                     const Box& box, double stride, int out, int sampling);

/// Per-category BPN output for one [d, k, k] boundary feature pooled from
/// `side`'s area (up/bottom read transposed).
std::vector<double> bpn_direct(std::span<const double> feature, Side side,
                               const BpnSideParams<double>& p, const BpnConfig& cfg);

struct BruteReport {
  double map = 0, ap50 = 0, ap75 = 0;
  std::optional<double> ap_small, ap_medium, ap_large;
};

/// Exhaustive evaluator: per-detection candidate scans, recall points by
/// direct maximization over ranks.
BruteReport brute_force_map(std::span<const ImageEval> images, int num_categories);

/// Precision at each of the 101 recall points by scanning all ranks.
std::optional<double> brute_force_ap(const std::vector<bool>& tp_flags, int num_gt);

}  // namespace pbr::selftest

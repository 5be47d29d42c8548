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

// Boundary predict network: one pooled boundary feature [d,k,k] in, one
// displacement per category out. Each of the four sides owns a separate
// copy of the weights.

#include <array>
#include <string>

#include "pbr/boxgeom.hpp"
#include "pbr/optim.hpp"
#include "pbr/tensor.hpp"

namespace pbr {

struct BpnConfig {
  int channels = 32;
  int pool = 7;
  int num_categories = 5;
  int attention_groups = 4;

  static BpnConfig full_scale(int num_categories) { return {256, 7, num_categories, 4}; }
  void validate() const;
};

template <typename T>
struct BpnSideParams {
  Tensor<T> conv1_w, conv1_b;
  Tensor<T> conv2_w, conv2_b;
  // Attention branch: grouped 3x3 conv d -> groups, 1x1 conv groups -> 1.
  Tensor<T> att_group_w, att_group_b;
  Tensor<T> att_proj_w, att_proj_b;
  Tensor<T> line1_w, line1_b;  // 1x3 convs along the boundary-normal axis
  Tensor<T> line2_w, line2_b;
  Tensor<T> fc_w, fc_b;
};

template <typename T>
struct BpnParams {
  std::array<BpnSideParams<T>, 4> sides;
  const BpnSideParams<T>& side(Side s) const { return sides[static_cast<int>(s)]; }
};

/// Registers the four side networks under `prefix` ("<prefix>.<side>.<layer>").
/// The final fc starts at zero so an untrained head predicts sigma = 0.
template <typename T>
BpnParams<T> register_bpn(ParameterSet<T>& params, const std::string& prefix,
                          const BpnConfig& config, Rng& rng);

/// Looks up previously registered weights (e.g. in a cast copy of the set).
template <typename T>
BpnParams<T> bind_bpn(ParameterSet<T>& params, const std::string& prefix);

/// Left/right pass through; up/bottom swap their spatial axes so the
/// boundary-parallel direction is always axis -2 (the summed one).
template <typename T>
Tensor<T> orient_feature(const Tensor<T>& feature, Side side);

/// Optional intermediate values for inspection.
template <typename T>
struct BpnTrace {
  Tensor<T> attention;  // [R,1,k,k]
};

/// feature: [R,d,k,k] already oriented -> [R,num_categories].
template <typename T>
Tensor<T> bpn_forward(const Tensor<T>& feature, const BpnSideParams<T>& params,
                      const BpnConfig& config, BpnTrace<T>* trace = nullptr);

/// Orients a raw boundary feature ([d,k,k] or [R,d,k,k]) and runs the side's
/// network.
template <typename T>
Tensor<T> bpn_forward(const Tensor<T>& feature, Side side, const BpnParams<T>& params,
                      const BpnConfig& config);

}  // namespace pbr

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

#include "pbr/bpn.hpp"

#include "pbr/error.hpp"

namespace pbr {
namespace {

template <typename T>
Tensor<T> lookup(ParameterSet<T>& params, const std::string& name) {
  auto* p = params.find(name);
  if (p == nullptr) throw InvalidArgument("missing parameter " + name);
  return p->value;
}

}  // namespace

void BpnConfig::validate() const {
  if (channels < 1 || attention_groups < 1 || channels % attention_groups != 0) {
    throw InvalidArgument("bpn: channels must be divisible by attention_groups");
  }
  if (pool < 3) throw InvalidArgument("bpn: pooled size must be >= 3");
  if (num_categories < 1) throw InvalidArgument("bpn: need at least one category");
}

template <typename T>
BpnParams<T> register_bpn(ParameterSet<T>& params, const std::string& prefix,
                          const BpnConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index d = cfg.channels, g = cfg.attention_groups, k = cfg.pool;
  BpnParams<T> out;
  for (Side s : kSides) {
    const std::string p = prefix + "." + side_name(s) + ".";
    auto& sp = out.sides[static_cast<int>(s)];
    sp.conv1_w = params.add_uniform(p + "conv1.weight", {d, d, 3, 3}, d * 9, rng);
    sp.conv1_b = params.add(p + "conv1.bias", {d});
    sp.conv2_w = params.add_uniform(p + "conv2.weight", {d, d, 3, 3}, d * 9, rng);
    sp.conv2_b = params.add(p + "conv2.bias", {d});
    sp.att_group_w =
        params.add_uniform(p + "att_group.weight", {g, d / g, 3, 3}, (d / g) * 9, rng);
    sp.att_group_b = params.add(p + "att_group.bias", {g});
    sp.att_proj_w = params.add_uniform(p + "att_proj.weight", {1, g, 1, 1}, g, rng);
    sp.att_proj_b = params.add(p + "att_proj.bias", {1});
    sp.line1_w = params.add_uniform(p + "line1.weight", {d, d, 1, 3}, d * 3, rng);
    sp.line1_b = params.add(p + "line1.bias", {d});
    sp.line2_w = params.add_uniform(p + "line2.weight", {d, d, 1, 3}, d * 3, rng);
    sp.line2_b = params.add(p + "line2.bias", {d});
    sp.fc_w = params.add(p + "fc.weight", {cfg.num_categories, d * k});
    sp.fc_b = params.add(p + "fc.bias", {cfg.num_categories});
  }
  return out;
}

template <typename T>
BpnParams<T> bind_bpn(ParameterSet<T>& params, const std::string& prefix) {
  BpnParams<T> out;
  for (Side s : kSides) {
    const std::string p = prefix + "." + side_name(s) + ".";
    auto& sp = out.sides[static_cast<int>(s)];
    sp.conv1_w = lookup(params, p + "conv1.weight");
    sp.conv1_b = lookup(params, p + "conv1.bias");
    sp.conv2_w = lookup(params, p + "conv2.weight");
    sp.conv2_b = lookup(params, p + "conv2.bias");
    sp.att_group_w = lookup(params, p + "att_group.weight");
    sp.att_group_b = lookup(params, p + "att_group.bias");
    sp.att_proj_w = lookup(params, p + "att_proj.weight");
    sp.att_proj_b = lookup(params, p + "att_proj.bias");
    sp.line1_w = lookup(params, p + "line1.weight");
    sp.line1_b = lookup(params, p + "line1.bias");
    sp.line2_w = lookup(params, p + "line2.weight");
    sp.line2_b = lookup(params, p + "line2.bias");
    sp.fc_w = lookup(params, p + "fc.weight");
    sp.fc_b = lookup(params, p + "fc.bias");
  }
  return out;
}

template <typename T>
Tensor<T> orient_feature(const Tensor<T>& feature, Side side) {
  if (side == Side::kLeft || side == Side::kRight) return feature;
  return transpose_last2(feature);
}

template <typename T>
Tensor<T> bpn_forward(const Tensor<T>& feature, const BpnSideParams<T>& p,
                      const BpnConfig& cfg, BpnTrace<T>* trace) {
  const Index d = cfg.channels, k = cfg.pool;
  if (feature.rank() != 4 || feature.dim(1) != d || feature.dim(2) != k ||
      feature.dim(3) != k) {
    throw ShapeError("bpn_forward: expected [R," + std::to_string(d) + "," +
                     std::to_string(k) + "," + std::to_string(k) + "], got " +
                     shape_string(feature.shape()));
  }
  const Index r = feature.dim(0);
  const Conv2dOptions same3{.pad_h = 1, .pad_w = 1};
  auto x = relu(conv2d(feature, p.conv1_w, p.conv1_b, same3));
  x = relu(conv2d(x, p.conv2_w, p.conv2_b, same3));

  Conv2dOptions grouped = same3;
  grouped.groups = cfg.attention_groups;
  auto logits = conv2d(relu(conv2d(x, p.att_group_w, p.att_group_b, grouped)),
                       p.att_proj_w, p.att_proj_b);
  auto attention = softmax(logits, 2);  // along Y: each column sums to 1
  if (trace) trace->attention = attention;

  auto pooled = sum(x * attention, 2);  // [R,d,1,k]
  const Conv2dOptions line{.pad_w = 1};
  auto v = relu(conv2d(pooled, p.line1_w, p.line1_b, line));
  v = relu(conv2d(v, p.line2_w, p.line2_b, line));
  return linear(reshape(v, {r, d * k}), p.fc_w, p.fc_b);
}

template <typename T>
Tensor<T> bpn_forward(const Tensor<T>& feature, Side side, const BpnParams<T>& params,
                      const BpnConfig& cfg) {
  if (feature.rank() == 3) {
    auto batched = reshape(feature, {1, feature.dim(0), feature.dim(1), feature.dim(2)});
    auto out = bpn_forward(orient_feature(batched, side), params.side(side), cfg);
    return reshape(out, {out.dim(1)});
  }
  return bpn_forward(orient_feature(feature, side), params.side(side), cfg);
}

#define PBR_INSTANTIATE_BPN(T)                                                         \
  template BpnParams<T> register_bpn(ParameterSet<T>&, const std::string&,             \
                                     const BpnConfig&, Rng&);                          \
  template BpnParams<T> bind_bpn(ParameterSet<T>&, const std::string&);                \
  template Tensor<T> orient_feature(const Tensor<T>&, Side);                           \
  template Tensor<T> bpn_forward(const Tensor<T>&, const BpnSideParams<T>&,            \
                                 const BpnConfig&, BpnTrace<T>*);                      \
  template Tensor<T> bpn_forward(const Tensor<T>&, Side, const BpnParams<T>&,          \
                                 const BpnConfig&);

PBR_INSTANTIATE_BPN(float)
PBR_INSTANTIATE_BPN(double)

}  // namespace pbr

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

#include <functional>
#include <vector>

#include "pbr/tensor.hpp"

namespace pbr::selftest {

template <typename T>
using LossFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

/// Analytic gradients of a scalar loss with respect to every input.
template <typename T>
std::vector<double> analytic_gradient(const LossFn<T>& loss, std::vector<Tensor<T>>& inputs);

/// Central differences of `loss` over every element of every input.
std::vector<double> numeric_gradient(const LossFn<double>& loss,
                                     std::vector<Tensor<double>>& inputs, double h = 1e-6);

/// Norm-relative error between the analytic and central-difference gradients.
double gradient_error(const LossFn<double>& loss, std::vector<Tensor<double>> inputs,
                      double h = 1e-6);

}  // namespace pbr::selftest

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

#include "pbr/optim.hpp"

#include <cmath>

#include "pbr/error.hpp"

namespace pbr {

template <typename T>
Tensor<T> ParameterSet<T>::add(std::string name, Shape shape) {
  if (find(name) != nullptr) throw InvalidArgument("duplicate parameter " + name);
  Tensor<T> t(std::move(shape), T(0), true);
  params_.push_back({std::move(name), t, std::vector<T>(t.numel(), T(0))});
  return t;
}

template <typename T>
Tensor<T> ParameterSet<T>::add_uniform(std::string name, Shape shape,
                                       Index fan_in, Rng& rng, double gain) {
  Tensor<T> t = add(std::move(name), std::move(shape));
  const double bound = std::sqrt(gain / static_cast<double>(fan_in));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
Parameter<T>* ParameterSet<T>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
std::size_t ParameterSet<T>::total_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const SgdOptions& opts) {
  for (auto& p : params) {
    if (!p.value.has_grad()) {
      throw InvalidArgument("sgd_step: parameter " + p.name + " has no gradient");
    }
  }
  const T lr = static_cast<T>(opts.lr);
  const T m = static_cast<T>(opts.momentum);
  const T wd = static_cast<T>(opts.weight_decay);
  for (auto& p : params) {
    auto w = p.value.data();
    auto g = p.value.grad();
    if (p.momentum.size() != w.size()) p.momentum.assign(w.size(), T(0));
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.momentum[i] = m * p.momentum[i] + g[i] + wd * w[i];
      w[i] -= lr * p.momentum[i];
    }
    p.value.clear_grad();
  }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template void sgd_step(std::vector<Parameter<float>>&, const SgdOptions&);
template void sgd_step(std::vector<Parameter<double>>&, const SgdOptions&);

}  // namespace pbr

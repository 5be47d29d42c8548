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

#include <string>
#include <vector>

#include "pbr/rng.hpp"
#include "pbr/tensor.hpp"

namespace pbr {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> momentum;
};

/// Named trainable tensors in registration order (which is also the
/// checkpoint order).
template <typename T>
class ParameterSet {
 public:
  Tensor<T> add(std::string name, Shape shape);
  /// Fills with U(-bound, bound), bound = sqrt(gain / fan_in).
  Tensor<T> add_uniform(std::string name, Shape shape, Index fan_in, Rng& rng,
                        double gain = 6.0);

  std::vector<Parameter<T>>& items() { return params_; }
  const std::vector<Parameter<T>>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }
  const Parameter<T>* find(const std::string& name) const;
  Parameter<T>* find(const std::string& name);

  void zero_grad();
  std::size_t total_values() const;

  /// Same names/shapes, values converted to another scalar type.
  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) {
      Tensor<U> t = out.add(p.name, p.value.shape());
      std::copy(p.value.data().begin(), p.value.data().end(), t.data().begin());
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
};

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// v <- m*v + g + wd*w;  w <- w - lr*v;  gradients are cleared afterwards.
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const SgdOptions& opts);

}  // namespace pbr

/*
 *  Copyright 2026 The MSEDenseNet Authors
 *
 *  Licensed under the Apache License, Version 2.0 (the "License");
 *  you may not use this file except in compliance with the License.
 *  You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 *  Unless required by applicable law or agreed to in writing, software
 *  distributed under the License is distributed on an "AS IS" BASIS,
 *  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 *  See the License for the specific language governing permissions and
 *  limitations under the License.
 */

#pragma once

#include <string>
#include <vector>

#include "msed/tensor.hpp"

namespace msed {

/// A trainable tensor with its registry name. `value` aliases the layer's
/// storage, so optimizers update the layer in place.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool is_kernel = false;  // conv/dense kernels receive L2; BN scale/shift and biases do not
};

/// Non-trainable state that still belongs in a checkpoint (running stats).
template <typename T>
struct Buffer {
  std::string name;
  std::vector<T>* values = nullptr;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;
template <typename T>
using BufferList = std::vector<Buffer<T>>;

}  // namespace msed

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

// Central finite-difference oracle for gradient checks. Independent of the
// autograd path: it only calls the forward closure.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "msed/tensor.hpp"

namespace msed::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// |a - n| / max(1, |a|, |n|): relative for large gradients, absolute for
/// small ones, so near-zero entries do not blow up the ratio.
inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Compares d loss / d input for every element of every tensor in `inputs`.
/// `loss` must rebuild the graph from the current values on every call.
inline GradCheckResult gradcheck(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> inputs,
                                 double h = 1e-5, std::size_t max_per_tensor = 0) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  auto l = loss();
  l.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    std::vector<double> g(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }
  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    std::size_t stride = 1;
    if (max_per_tensor && t.numel() > max_per_tensor) stride = t.numel() / max_per_tensor;
    for (std::size_t i = 0; i < t.numel(); i += stride) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = loss().item();
      t[i] = orig - h;
      const double down = loss().item();
      t[i] = orig;
      const double numeric = (up - down) / (2 * h);
      res.max_rel_error = std::max(res.max_rel_error, grad_rel_error(analytic[ti][i], numeric));
      ++res.checked;
    }
  }
  return res;
}

inline Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace msed::testing

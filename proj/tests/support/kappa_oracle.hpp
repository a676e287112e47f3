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

// Brute-force quadratic weighted kappa: materializes the full weight and
// expected-count matrices. Kept apart from the library implementation.

#include <vector>

#include "msed/metrics.hpp"

namespace msed::testing {

struct KappaOracle {
  double observed = 0, expected = 0, kappa = 0;
};

inline KappaOracle brute_force_kappa(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  std::vector<std::vector<double>> w(n, std::vector<double>(n)), e(n, std::vector<double>(n));
  double total = 0;
  std::vector<double> rows(n, 0.0), cols(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double o = static_cast<double>(cm.at(i, j));
      rows[i] += o;
      cols[j] += o;
      total += o;
    }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = double(i) - double(j);
      w[i][j] = d * d / double((n - 1) * (n - 1));
      e[i][j] = rows[i] * cols[j] / total;
    }
  KappaOracle out;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      out.observed += w[i][j] * double(cm.at(i, j));
      out.expected += w[i][j] * e[i][j];
    }
  out.kappa = 1.0 - out.observed / out.expected;
  return out;
}

}  // namespace msed::testing

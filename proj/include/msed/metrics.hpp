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

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace msed {

/// N x N count matrix; rows are the actual class, columns the predicted one.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 5);
  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts);

  void accumulate(int actual, int predicted);
  /// Entrywise sum; shards of an evaluation merge into one matrix.
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return n_; }
  std::uint64_t at(std::size_t actual, std::size_t predicted) const { return counts_[actual * n_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t actual) const;
  std::uint64_t col_sum(std::size_t predicted) const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  /// Reads an N x N integer CSV (rows = actual). Blank lines and lines
  /// starting with '#' are skipped.
  static ConfusionMatrix from_csv(std::istream& in);
  static ConfusionMatrix from_csv_file(const std::string& path);
  void to_csv(std::ostream& out) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t n_;
  std::vector<std::uint64_t> counts_;
};

struct ClassScores {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct PrecisionRecallF1 {
  std::vector<ClassScores> per_class;
  ClassScores macro;
};

/// Per-class scores from TP = O[c][c], FP = column sum - TP, FN = row sum - TP.
/// A zero denominator yields 0. Macro values are unweighted class means
/// (macro F1 is the mean of per-class F1).
PrecisionRecallF1 precision_recall_f1(const ConfusionMatrix& cm);

/// trace / total.
double accuracy(const ConfusionMatrix& cm);

struct KappaResult {
  double value = 0;
  double weighted_observed = 0;  // sum W_ij O_ij
  double weighted_expected = 0;  // sum W_ij E_ij
  bool degenerate = false;       // sum W_ij E_ij == 0; value forced to 0
};

/// Quadratic weighted kappa with W_ij = (i-j)^2/(N-1)^2 and chance counts
/// E_ij = row_i * col_j / total.
KappaResult weighted_kappa_detail(const ConfusionMatrix& cm);
double weighted_kappa(const ConfusionMatrix& cm);

struct MetricsReport {
  std::vector<ClassScores> per_class;
  ClassScores macro;
  double accuracy = 0;
  double wks = 0;
  bool wks_degenerate = false;
  std::uint64_t total = 0;
};

MetricsReport compute_report(const ConfusionMatrix& cm);

/// Aligned plain-text table: matrix, per-class scores, aggregates.
std::string format_report_text(const ConfusionMatrix& cm, const MetricsReport& report);
/// One JSON object per line, one line per metric.
std::string format_report_jsonl(const MetricsReport& report);

}  // namespace msed

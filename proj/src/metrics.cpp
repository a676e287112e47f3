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

#include "msed/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

namespace msed {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : n_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("confusion matrix needs at least one class");
}

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts)
    : n_(classes), counts_(std::move(counts)) {
  if (classes == 0 || counts_.size() != classes * classes)
    throw std::invalid_argument("confusion matrix: expected " + std::to_string(classes * classes) + " counts");
}

void ConfusionMatrix::accumulate(int actual, int predicted) {
  const auto n = static_cast<int>(n_);
  if (actual < 0 || actual >= n || predicted < 0 || predicted >= n)
    throw std::out_of_range("confusion matrix: label pair (" + std::to_string(actual) + "," +
                            std::to_string(predicted) + ") outside [0," + std::to_string(n_) + ")");
  ++counts_[static_cast<std::size_t>(actual) * n_ + static_cast<std::size_t>(predicted)];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw std::invalid_argument("confusion matrix: cannot merge different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < n_; ++i) s += at(i, i);
  return s;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t actual) const {
  std::uint64_t s = 0;
  for (std::size_t j = 0; j < n_; ++j) s += at(actual, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < n_; ++i) s += at(i, predicted);
  return s;
}

ConfusionMatrix ConfusionMatrix::from_csv(std::istream& in) {
  std::vector<std::vector<std::uint64_t>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos || line[line.find_first_not_of(" \t")] == '#') continue;
    std::vector<std::uint64_t> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      std::size_t pos = 0;
      long long v = 0;
      try {
        v = std::stoll(cell, &pos);
      } catch (const std::exception&) {
        throw std::invalid_argument("confusion csv: non-integer cell '" + cell + "'");
      }
      if (cell.find_first_not_of(" \t", pos) != std::string::npos)
        throw std::invalid_argument("confusion csv: non-integer cell '" + cell + "'");
      if (v < 0) throw std::invalid_argument("confusion csv: negative count " + cell);
      row.push_back(static_cast<std::uint64_t>(v));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("confusion csv: no rows");
  const std::size_t n = rows.size();
  std::vector<std::uint64_t> counts;
  for (const auto& r : rows) {
    if (r.size() != n)
      throw std::invalid_argument("confusion csv: expected " + std::to_string(n) + " columns per row, got " +
                                  std::to_string(r.size()));
    counts.insert(counts.end(), r.begin(), r.end());
  }
  return ConfusionMatrix(n, std::move(counts));
}

ConfusionMatrix ConfusionMatrix::from_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open confusion matrix file '" + path + "'");
  return from_csv(in);
}

void ConfusionMatrix::to_csv(std::ostream& out) const {
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) out << (j ? "," : "") << at(i, j);
    out << '\n';
  }
}

namespace {
double safe_div(double num, double den) { return den == 0 ? 0.0 : num / den; }
}  // namespace

PrecisionRecallF1 precision_recall_f1(const ConfusionMatrix& cm) {
  PrecisionRecallF1 out;
  const std::size_t n = cm.classes();
  for (std::size_t c = 0; c < n; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double fp = static_cast<double>(cm.col_sum(c)) - tp;
    const double fn = static_cast<double>(cm.row_sum(c)) - tp;
    ClassScores s;
    s.precision = safe_div(tp, tp + fp);
    s.recall = safe_div(tp, tp + fn);
    s.f1 = safe_div(2 * s.precision * s.recall, s.precision + s.recall);
    out.per_class.push_back(s);
    out.macro.precision += s.precision / static_cast<double>(n);
    out.macro.recall += s.recall / static_cast<double>(n);
    out.macro.f1 += s.f1 / static_cast<double>(n);
  }
  return out;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw std::invalid_argument("accuracy: empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

KappaResult weighted_kappa_detail(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  const double total = static_cast<double>(cm.total());
  if (total == 0) throw std::invalid_argument("weighted kappa: empty confusion matrix");
  KappaResult r;
  if (n == 1) {
    r.degenerate = true;
    return r;
  }
  std::vector<double> rows(n), cols(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = static_cast<double>(cm.row_sum(i));
    cols[i] = static_cast<double>(cm.col_sum(i));
  }
  const double norm = static_cast<double>((n - 1) * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / norm;
      r.weighted_observed += w * static_cast<double>(cm.at(i, j));
      r.weighted_expected += w * rows[i] * cols[j] / total;
    }
  if (r.weighted_expected == 0) {
    r.degenerate = true;
    r.value = 0;
    return r;
  }
  r.value = 1.0 - r.weighted_observed / r.weighted_expected;
  return r;
}

double weighted_kappa(const ConfusionMatrix& cm) { return weighted_kappa_detail(cm).value; }

MetricsReport compute_report(const ConfusionMatrix& cm) {
  MetricsReport rep;
  auto prf = precision_recall_f1(cm);
  rep.per_class = std::move(prf.per_class);
  rep.macro = prf.macro;
  rep.accuracy = accuracy(cm);
  auto k = weighted_kappa_detail(cm);
  rep.wks = k.value;
  rep.wks_degenerate = k.degenerate;
  rep.total = cm.total();
  return rep;
}

std::string format_report_text(const ConfusionMatrix& cm, const MetricsReport& report) {
  std::ostringstream os;
  const std::size_t n = cm.classes();
  os << "confusion matrix (rows = actual, cols = predicted)\n";
  os << std::setw(8) << "";
  for (std::size_t j = 0; j < n; ++j) os << std::setw(8) << j;
  os << '\n';
  for (std::size_t i = 0; i < n; ++i) {
    os << std::setw(8) << i;
    for (std::size_t j = 0; j < n; ++j) os << std::setw(8) << cm.at(i, j);
    os << '\n';
  }
  os << '\n' << std::setw(8) << "class" << std::setw(12) << "precision" << std::setw(12) << "recall" << std::setw(12)
     << "f1" << '\n';
  os << std::fixed << std::setprecision(4);
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& s = report.per_class[c];
    os << std::setw(8) << c << std::setw(12) << s.precision << std::setw(12) << s.recall << std::setw(12) << s.f1
       << '\n';
  }
  os << std::setw(8) << "macro" << std::setw(12) << report.macro.precision << std::setw(12) << report.macro.recall
     << std::setw(12) << report.macro.f1 << '\n';
  os << '\n' << "accuracy " << report.accuracy << '\n';
  os << "wks      " << report.wks << (report.wks_degenerate ? "  (degenerate marginals, defined as 0)" : "") << '\n';
  os << "samples  " << report.total << '\n';
  return os.str();
}

std::string format_report_jsonl(const MetricsReport& report) {
  std::ostringstream os;
  auto emit = [&](nlohmann::json j) { os << j.dump() << '\n'; };
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& s = report.per_class[c];
    emit({{"metric", "precision"}, {"class", c}, {"value", s.precision}});
    emit({{"metric", "recall"}, {"class", c}, {"value", s.recall}});
    emit({{"metric", "f1"}, {"class", c}, {"value", s.f1}});
  }
  emit({{"metric", "precision"}, {"class", "macro"}, {"value", report.macro.precision}});
  emit({{"metric", "recall"}, {"class", "macro"}, {"value", report.macro.recall}});
  emit({{"metric", "f1"}, {"class", "macro"}, {"value", report.macro.f1}});
  emit({{"metric", "accuracy"}, {"value", report.accuracy}});
  emit({{"metric", "wks"}, {"value", report.wks}, {"degenerate", report.wks_degenerate}});
  emit({{"metric", "samples"}, {"value", report.total}});
  return os.str();
}

}  // namespace msed

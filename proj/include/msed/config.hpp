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
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "msed/data.hpp"
#include "msed/nn.hpp"
#include "msed/optim.hpp"

namespace msed {

enum class PhaseKind { kClassification, kRegression, kFusion };
enum class OptimizerKind { kSgd, kAdam };
enum class LossKind { kCrossEntropy, kMse };

const char* phase_name(PhaseKind kind);

/// One training phase of the three-phase schedule.
struct TrainPhase {
  PhaseKind kind = PhaseKind::kClassification;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  int epochs = 250;
  std::size_t batch_size = 2;
  LrSchedule schedule = LrSchedule::classification();
  LossKind loss = LossKind::kCrossEntropy;
  bool class_weighted = true;
  bool augment = true;
  double l2 = kDefaultL2;

  static TrainPhase classification();
  static TrainPhase regression();
  static TrainPhase fusion();
  void validate() const;
};

enum class DataSource { kSynthetic, kDirectory };

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  std::string root;    // image directory (directory source)
  std::string labels;  // labels CSV (directory source)
  double train_fraction = 0.9;
  std::map<int, std::size_t> cap_class;
  std::size_t synth_train_per_class = 200;
  std::size_t synth_val_per_class = 40;
};

/// Everything a run needs. Built from a profile, then overridden key by key.
struct PipelineConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;
  bool strict_determinism = false;
  std::string output_dir = "msed_run";
  NetworkSpec spec = NetworkSpec::desk();
  DataConfig data;
  AugmentPolicy augment;
  TrainPhase cls = TrainPhase::classification();
  TrainPhase reg = TrainPhase::regression();
  TrainPhase fusion = TrainPhase::fusion();

  /// 32x32 synthetic-scale run: small spec, batch 8, 30/15/15 epochs.
  static PipelineConfig desk();
  /// Full-size architecture and the 250/50/50 batch-2 schedule.
  static PipelineConfig paper();
  static PipelineConfig profile_named(const std::string& name);

  /// Applies one key=value override; unknown keys and bad values throw.
  void set(const std::string& key, const std::string& value);
  /// Effective settings as key=value pairs, in documented order.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  void write(std::ostream& out) const;
  void validate() const;
};

struct ConfigKey {
  const char* key;
  const char* help;
};
/// The documented key list.
const std::vector<ConfigKey>& config_keys();

/// Parses `key = value` lines ('#' starts a comment). Duplicate and unknown
/// keys are errors; the line number is included in every message.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in, const std::string& origin);

/// Profile from `profile_override` if non-empty, else the file's `profile`
/// key, else desk; then every other key in file order.
PipelineConfig load_config(const std::string& path, const std::string& profile_override = "");

}  // namespace msed

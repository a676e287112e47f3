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
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "msed/checkpoint.hpp"
#include "msed/config.hpp"
#include "msed/data.hpp"
#include "msed/metrics.hpp"
#include "msed/nn.hpp"

namespace msed {

/// Independent stream seed for one purpose ("cls.init", "split", ...).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  std::optional<double> momentum;
  int plateau_reductions = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_metric = 0;  // accuracy, or MSE for regression
  bool improved = false;
};

struct History {
  PhaseKind kind = PhaseKind::kClassification;
  bool higher_is_better = true;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_metric = 0;

  std::vector<double> val_losses() const;
  /// One JSON object per epoch.
  std::string to_jsonl() const;
};

struct TrainHooks {
  /// Written whenever the validation metric improves; empty disables.
  std::string checkpoint_path;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct SplitData {
  Dataset train;
  Dataset val;
};

/// Synthetic train/val sets, or the labeled directory resized and split.
SplitData prepare_data(const PipelineConfig& config);

SeDenseNet<float> make_backbone(const NetworkSpec& spec, HeadKind head, std::uint64_t seed);

/// Phase 1 or 2: minibatch training of one backbone with per-epoch
/// validation. The best snapshot is restored into `net` before returning.
/// A non-finite loss aborts with the name of the first layer whose output
/// went non-finite.
History train_backbone(SeDenseNet<float>& net, const Dataset& train, const Dataset& val, const TrainPhase& phase,
                       const AugmentPolicy& augment, std::uint64_t seed, const TrainHooks& hooks = {});

/// Classification and regression backbones plus the fusion classifier.
struct FusionModel {
  SeDenseNet<float> cls;
  SeDenseNet<float> reg;
  FusionMlp<float> mlp;

  /// Rejects backbones with mismatched input geometry or wrong heads.
  FusionModel(SeDenseNet<float> cls_net, SeDenseNet<float> reg_net, std::uint64_t mlp_seed);
  FusionModel(SeDenseNet<float> cls_net, SeDenseNet<float> reg_net, FusionMlp<float> fusion);
};

struct FeatureSet {
  Tensor<float> features;  // [N, D]
  Tensor<float> outputs;   // head outputs [N, M] or [N, 1]
};

/// Inference-mode forward over `data` without recording gradients. With a
/// policy, each image is augmented from its (seed, id, epoch) stream first.
FeatureSet extract_features(SeDenseNet<float>& net, const Dataset& data, const AugmentPolicy* augment = nullptr,
                            std::uint64_t seed = 0, std::uint64_t epoch = 0, std::size_t batch_size = 32);

/// Phase 3: trains only the fusion MLP on features of the frozen backbones.
History train_fusion(FusionModel& model, const Dataset& train, const Dataset& val, const TrainPhase& phase,
                     const AugmentPolicy& augment, std::uint64_t seed, const TrainHooks& hooks = {});

struct Prediction {
  std::vector<double> probs;
  double severity = 0;  // raw regression output, not rounded to a stage
  int stage = 0;        // argmax of probs
};

/// x is [N,C,H,W] at the model input size.
std::vector<Prediction> predict_batch(FusionModel& model, const Tensor<float>& x);
/// One preprocessed image [C,H,W].
Prediction predict(FusionModel& model, const Tensor<float>& image);

struct Evaluation {
  ConfusionMatrix cm;
  MetricsReport report;
  std::vector<double> severity_mean;  // per true stage; NaN when the stage is absent
};

/// Deterministic inference pass, no augmentation.
Evaluation evaluate(FusionModel& model, const Dataset& data);
/// Single-task baseline: argmax of the classification backbone alone.
Evaluation evaluate_classifier(SeDenseNet<float>& net, const Dataset& data);
/// Mean regression output per true stage.
std::vector<double> severity_means(SeDenseNet<float>& reg, const Dataset& data);

// Persistence.
void append_backbone(CheckpointFile& ckpt, SeDenseNet<float>& net, const std::string& prefix);
SeDenseNet<float> restore_backbone(const CheckpointFile& ckpt, const std::string& prefix);
void save_backbone(const std::string& path, SeDenseNet<float>& net, const std::map<std::string, std::string>& meta = {});
SeDenseNet<float> load_backbone(const std::string& path);
void save_checkpoint(FusionModel& model, const std::string& path, const std::map<std::string, std::string>& meta = {});
FusionModel load_checkpoint(const std::string& path);

struct MultitaskResult {
  FusionModel model;
  History cls_history;
  History reg_history;
  History fusion_history;
  Evaluation fusion_eval;
  Evaluation cls_only_eval;
};

struct RunOptions {
  bool write_outputs = true;  // checkpoints, histories and reports under output_dir
  std::function<void(std::string_view)> log;
};

/// Phases 1 and 2 (independent), then the fusion phase on frozen backbones,
/// then evaluation on the validation split.
MultitaskResult train_multitask(const PipelineConfig& config, const RunOptions& options = {});
MultitaskResult train_multitask(const PipelineConfig& config, const SplitData& data, const RunOptions& options = {});

struct AblationRow {
  std::uint64_t seed = 0;
  double cls_only_accuracy = 0;
  double fusion_accuracy = 0;
  double random_reg_fusion_accuracy = 0;
};

struct AblationSummary {
  std::vector<AblationRow> rows;
  double mean_cls_only = 0;
  double mean_fusion = 0;
  double mean_random_reg = 0;
  double delta() const { return mean_fusion - mean_cls_only; }
  std::string to_text() const;
};

/// Retrains only the fusion MLP on top of the trained classification
/// backbone and an untrained regression backbone; returns validation accuracy.
double random_regression_fusion_accuracy(MultitaskResult& trained, const PipelineConfig& config,
                                         const SplitData& data);
AblationSummary summarize_ablation(std::vector<AblationRow> rows);

}  // namespace msed

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
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "msed/image_io.hpp"
#include "msed/tensor.hpp"

namespace msed {

inline constexpr int kNumStages = 5;

/// Ordinal regression target of a stage: 0, 0.2, 0.4, 0.6, 0.8.
double regression_target(int stage);

/// Image scaled to [0,1] in CHW layout, plus its severity stage.
struct LabeledSample {
  std::string id;
  Tensor<float> image;  // [C,H,W]
  int stage = 0;
  double regression_target = 0.0;
};

using Dataset = std::vector<LabeledSample>;

struct RawSample {
  std::string id;
  RawImage image;
  int stage = 0;
};

struct LoadOptions {
  /// Per-stage cap with seeded subsampling, e.g. {0: 10000}.
  std::map<int, std::size_t> cap_class;
  std::uint64_t seed = 0;
};

struct RawDataset {
  std::vector<RawSample> samples;
  std::vector<std::size_t> stage_counts;  // kNumStages entries
};

/// Reads `labels_file` (CSV with header `id_code,diagnosis`) and the image
/// `<id>.png` or `<id>.ppm` under `root_dir` for every row. Every missing
/// image id is listed in the error.
RawDataset load_dataset(const std::string& root_dir, const std::string& labels_file, const LoadOptions& options = {});

/// Bilinear resize (half-pixel centers) to height x width and divide by 255.
LabeledSample resize_normalize(const RawSample& sample, std::size_t height, std::size_t width);
Dataset resize_normalize(const RawDataset& raw, std::size_t height, std::size_t width);

/// Inclusive sampling interval; lo == hi pins the value.
struct Range {
  double lo = 0;
  double hi = 0;
  bool is_zero() const { return lo == 0 && hi == 0; }
};

/// Random affine augmentation parameters. Shifts and zoom are fractions of
/// the image size; angles are degrees.
struct AugmentPolicy {
  Range rotation_deg{-15, 15};
  double h_flip = 0.5;
  Range width_shift{-0.1, 0.1};
  Range height_shift{-0.1, 0.1};
  Range zoom{-0.1, 0.1};
  Range shear_deg{-10, 10};
  std::uint64_t seed = 0;

  static AugmentPolicy identity();
  bool is_identity() const;
  void validate() const;
};

/// Sampled transform parameters for one image.
struct AffineParams {
  double rotation_deg = 0;
  bool flip = false;
  double shift_x = 0;  // pixels
  double shift_y = 0;
  double zoom_x = 1;
  double zoom_y = 1;
  double shear_deg = 0;
};

AffineParams sample_affine(const AugmentPolicy& policy, std::size_t height, std::size_t width, std::mt19937_64& rng);

/// Applies one affine transform about the image center, sampling bilinearly
/// and filling out-of-bounds pixels from the nearest edge.
Tensor<float> apply_affine(const Tensor<float>& image, const AffineParams& params);

/// Label and shape are preserved; an identity policy returns the image bit for bit.
LabeledSample augment(const LabeledSample& sample, const AugmentPolicy& policy, std::mt19937_64& rng);

/// RNG stream for one sample, independent of worker count and visit order.
std::mt19937_64 sample_stream(std::uint64_t seed, std::string_view sample_id, std::uint64_t epoch);

struct ClassWeights {
  std::vector<double> w;
  std::vector<std::size_t> counts;
  std::size_t n = 0;
  std::size_t k = 0;
};

/// w_j = n / (k * n_j). Every count must be positive.
ClassWeights class_weights(std::span<const std::size_t> counts);
std::vector<std::size_t> stage_histogram(const Dataset& data);

/// Seeded random partition into (train, val) of sizes round(f*n) and the rest.
std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction, std::uint64_t seed);

/// Synthetic fundus-like images: a dark disc with stage+1 bright Gaussian
/// blobs and pixel noise. Blob count rises with severity.
Dataset synth_generate(std::size_t n_per_class, std::size_t image_size, std::uint64_t seed);

/// Writes `<id>.ppm` images and `labels.csv` in the loader's layout.
void export_dataset(const Dataset& data, const std::string& dir);

/// Stacks samples[indices] into [N,C,H,W].
Tensor<float> stack_images(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace msed

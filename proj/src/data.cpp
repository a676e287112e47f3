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

#include "msed/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace msed {

namespace fs = std::filesystem;

double regression_target(int stage) {
  if (stage < 0 || stage >= kNumStages) throw std::out_of_range("stage " + std::to_string(stage) + " outside 0..4");
  static constexpr double kTargets[kNumStages] = {0.0, 0.2, 0.4, 0.6, 0.8};
  return kTargets[stage];
}

namespace {

std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(s.find_last_not_of(ws) + 1);
  s.erase(0, s.find_first_not_of(ws));
  return s;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double sample_range(const Range& r, std::mt19937_64& rng) {
  if (r.lo == r.hi) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

// Coordinates within this distance of an integer are treated as exact so that
// lattice-preserving transforms (flips, quarter turns) copy pixels verbatim.
double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-6 ? r : v;
}

float bilinear(const float* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  if (fy == 0 && fx == 0) return plane[y0 * w + x0];
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bottom = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bottom * fy);
}

}  // namespace

RawDataset load_dataset(const std::string& root_dir, const std::string& labels_file, const LoadOptions& options) {
  std::ifstream in(labels_file);
  if (!in) throw std::runtime_error("cannot open labels file '" + labels_file + "'");
  RawDataset out;
  out.stage_counts.assign(kNumStages, 0);

  std::string line;
  std::vector<std::pair<std::string, int>> rows;
  bool header_seen = false;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    line = trim(line);
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != "id_code,diagnosis")
        throw std::runtime_error("labels file '" + labels_file + "': expected header 'id_code,diagnosis', got '" +
                                 line + "'");
      header_seen = true;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw std::runtime_error("labels file line " + std::to_string(line_no) + ": expected 'id_code,diagnosis'");
    std::string id = trim(line.substr(0, comma));
    std::string diag = trim(line.substr(comma + 1));
    int stage = -1;
    try {
      std::size_t pos = 0;
      stage = std::stoi(diag, &pos);
      if (pos != diag.size()) stage = -1;
    } catch (const std::exception&) {
      stage = -1;
    }
    if (stage < 0 || stage >= kNumStages)
      throw std::runtime_error("labels file line " + std::to_string(line_no) + ": diagnosis '" + diag +
                               "' outside 0..4 for id '" + id + "'");
    rows.emplace_back(std::move(id), stage);
  }

  // Seeded per-stage subsampling keeps the original row order of survivors.
  if (!options.cap_class.empty()) {
    std::vector<bool> keep(rows.size(), true);
    for (const auto& [stage, cap] : options.cap_class) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (rows[i].second == stage) idx.push_back(i);
      if (idx.size() <= cap) continue;
      std::mt19937_64 rng(splitmix64(options.seed ^ static_cast<std::uint64_t>(stage)));
      std::shuffle(idx.begin(), idx.end(), rng);
      for (std::size_t i = cap; i < idx.size(); ++i) keep[idx[i]] = false;
    }
    std::vector<std::pair<std::string, int>> kept;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (keep[i]) kept.push_back(std::move(rows[i]));
    rows = std::move(kept);
  }

  std::vector<std::string> missing;
  for (auto& [id, stage] : rows) {
    fs::path base = fs::path(root_dir) / id;
    fs::path png = base, ppm = base;
    png += ".png";
    ppm += ".ppm";
    fs::path chosen;
    if (fs::exists(png))
      chosen = png;
    else if (fs::exists(ppm))
      chosen = ppm;
    if (chosen.empty()) {
      missing.push_back(id);
      continue;
    }
    out.samples.push_back({id, read_image(chosen.string()), stage});
    ++out.stage_counts[stage];
  }
  if (!missing.empty()) {
    std::string msg = "missing image file for " + std::to_string(missing.size()) + " labeled id(s):";
    for (const auto& id : missing) msg += " " + id;
    throw std::runtime_error(msg);
  }
  return out;
}

LabeledSample resize_normalize(const RawSample& sample, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw std::invalid_argument("resize_normalize: degenerate target size");
  const RawImage& img = sample.image;
  if (img.width == 0 || img.height == 0) throw std::invalid_argument("resize_normalize: empty source image");
  LabeledSample out;
  out.id = sample.id;
  out.stage = sample.stage;
  out.regression_target = regression_target(sample.stage);
  out.image = Tensor<float>({RawImage::kChannels, height, width});
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  std::vector<float> plane(img.width * img.height);
  for (std::size_t c = 0; c < RawImage::kChannels; ++c) {
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] = img.pixels[i * 3 + c];
    float* dst = out.image.raw() + c * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
      for (std::size_t x = 0; x < width; ++x) {
        const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
        const float v = bilinear(plane.data(), img.height, img.width, src_y, src_x) / 255.0f;
        dst[y * width + x] = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

Dataset resize_normalize(const RawDataset& raw, std::size_t height, std::size_t width) {
  Dataset out;
  out.reserve(raw.samples.size());
  for (const auto& s : raw.samples) out.push_back(resize_normalize(s, height, width));
  return out;
}

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.rotation_deg = p.width_shift = p.height_shift = p.zoom = p.shear_deg = Range{};
  p.h_flip = 0;
  return p;
}

bool AugmentPolicy::is_identity() const {
  return rotation_deg.is_zero() && h_flip == 0 && width_shift.is_zero() && height_shift.is_zero() && zoom.is_zero() &&
         shear_deg.is_zero();
}

void AugmentPolicy::validate() const {
  for (const Range* r : {&rotation_deg, &width_shift, &height_shift, &zoom, &shear_deg})
    if (!std::isfinite(r->lo) || !std::isfinite(r->hi) || r->lo > r->hi)
      throw std::invalid_argument("augment policy: ranges must be finite with lo <= hi");
  if (!(h_flip >= 0 && h_flip <= 1)) throw std::invalid_argument("augment policy: h_flip must be a probability");
  if (zoom.lo <= -1) throw std::invalid_argument("augment policy: zoom fraction must stay above -1");
  if (shear_deg.lo <= -90 || shear_deg.hi >= 90) throw std::invalid_argument("augment policy: shear must be within 90 degrees");
}

AffineParams sample_affine(const AugmentPolicy& policy, std::size_t height, std::size_t width, std::mt19937_64& rng) {
  AffineParams p;
  p.rotation_deg = sample_range(policy.rotation_deg, rng);
  p.flip = policy.h_flip > 0 && std::uniform_real_distribution<double>(0, 1)(rng) < policy.h_flip;
  p.shift_x = sample_range(policy.width_shift, rng) * static_cast<double>(width);
  p.shift_y = sample_range(policy.height_shift, rng) * static_cast<double>(height);
  p.zoom_x = 1.0 + sample_range(policy.zoom, rng);
  p.zoom_y = 1.0 + sample_range(policy.zoom, rng);
  p.shear_deg = sample_range(policy.shear_deg, rng);
  return p;
}

Tensor<float> apply_affine(const Tensor<float>& image, const AffineParams& params) {
  if (image.rank() != 3) throw std::invalid_argument("apply_affine: expects [C,H,W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  // Forward map on centered y-down coordinates: rotate * shear * zoom * flip.
  // Positive angles turn the picture counter-clockwise as displayed.
  const double th = params.rotation_deg * std::numbers::pi / 180.0;
  const double sh = std::tan(params.shear_deg * std::numbers::pi / 180.0);
  const double cs = std::cos(th), sn = std::sin(th);
  const double fl = params.flip ? -1.0 : 1.0;
  // rot = [[cs, sn], [-sn, cs]]; shear = [[1, sh], [0, 1]]; zoom*flip = diag(fl*zx, zy)
  const double a = cs * fl * params.zoom_x;
  const double b = (cs * sh + sn) * params.zoom_y;
  const double cc = -sn * fl * params.zoom_x;
  const double d = (-sn * sh + cs) * params.zoom_y;
  const double det = a * d - b * cc;
  if (std::abs(det) < 1e-12) throw std::invalid_argument("apply_affine: singular transform");
  const double ia = d / det, ib = -b / det, ic = -cc / det, id = a / det;
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;

  Tensor<float> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) - cx - params.shift_x;
      const double v = static_cast<double>(y) - cy - params.shift_y;
      const double sx = snap(ia * u + ib * v + cx);
      const double sy = snap(ic * u + id * v + cy);
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(ch * h + y) * w + x] = bilinear(image.raw() + ch * h * w, h, w, sy, sx);
    }
  return out;
}

LabeledSample augment(const LabeledSample& sample, const AugmentPolicy& policy, std::mt19937_64& rng) {
  LabeledSample out = sample;
  if (policy.is_identity()) {
    out.image = sample.image.clone();
    return out;
  }
  const auto params = sample_affine(policy, sample.image.dim(1), sample.image.dim(2), rng);
  out.image = apply_affine(sample.image, params);
  return out;
}

std::mt19937_64 sample_stream(std::uint64_t seed, std::string_view sample_id, std::uint64_t epoch) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ fnv1a(sample_id)) + epoch));
}

ClassWeights class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw std::invalid_argument("class_weights: no classes");
  ClassWeights cw;
  cw.k = counts.size();
  cw.counts.assign(counts.begin(), counts.end());
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] == 0) throw std::invalid_argument("class_weights: class " + std::to_string(j) + " has no samples");
    cw.n += counts[j];
  }
  for (std::size_t nj : counts)
    cw.w.push_back(static_cast<double>(cw.n) / (static_cast<double>(cw.k) * static_cast<double>(nj)));
  return cw;
}

std::vector<std::size_t> stage_histogram(const Dataset& data) {
  std::vector<std::size_t> h(kNumStages, 0);
  for (const auto& s : data) ++h.at(static_cast<std::size_t>(s.stage));
  return h;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("split: fraction must be in (0,1)");
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(data.size())));
  if (n_train == 0 || n_train == data.size())
    throw std::invalid_argument("split: fraction " + std::to_string(train_fraction) + " of " +
                                std::to_string(data.size()) + " samples leaves one side empty");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::pair<Dataset, Dataset> out;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? out.first : out.second).push_back(data[idx[i]]);
  return out;
}

Dataset synth_generate(std::size_t n_per_class, std::size_t image_size, std::uint64_t seed) {
  if (image_size < 16) throw std::invalid_argument("synth_generate: image size must be >= 16");
  const double size = static_cast<double>(image_size);
  const double disc_r = 0.45 * size;
  const double sigma = 0.05 * size;
  const double min_sep = 5.0 * sigma;
  const double place_r = 0.7 * disc_r;
  const double center = (size - 1) / 2;
  constexpr double kBackground[3] = {0.35, 0.15, 0.08};
  constexpr double kBlobTint[3] = {1.0, 0.95, 0.6};
  constexpr double kBlobAmplitude = 0.7;
  constexpr double kNoise = 0.03;

  Dataset out;
  out.reserve(n_per_class * kNumStages);
  for (int stage = 0; stage < kNumStages; ++stage) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      LabeledSample s;
      s.id = "synth_s" + std::to_string(stage) + "_" + std::to_string(i);
      s.stage = stage;
      s.regression_target = regression_target(stage);
      auto rng = sample_stream(seed, s.id, 0);
      std::uniform_real_distribution<double> unit(0, 1);
      std::normal_distribution<double> noise(0, kNoise);

      // Rejection-sample well separated blob centers inside the disc.
      std::vector<std::pair<double, double>> blobs;
      std::size_t attempts = 0;
      while (blobs.size() < static_cast<std::size_t>(stage + 1)) {
        if (++attempts % 1000 == 0) blobs.clear();  // painted into a corner; start over
        const double r = place_r * std::sqrt(unit(rng));
        const double t = 2 * std::numbers::pi * unit(rng);
        const double bx = center + r * std::cos(t), by = center + r * std::sin(t);
        bool ok = true;
        for (auto [ox, oy] : blobs) ok = ok && std::hypot(bx - ox, by - oy) >= min_sep;
        if (ok) blobs.emplace_back(bx, by);
      }

      s.image = Tensor<float>({3, image_size, image_size});
      for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
          const double dx = static_cast<double>(x) - center, dy = static_cast<double>(y) - center;
          const bool inside = std::hypot(dx, dy) <= disc_r;
          double blob = 0;
          for (auto [bx, by] : blobs) {
            const double ex = static_cast<double>(x) - bx, ey = static_cast<double>(y) - by;
            blob += kBlobAmplitude * std::exp(-(ex * ex + ey * ey) / (2 * sigma * sigma));
          }
          for (std::size_t c = 0; c < 3; ++c) {
            double v = (inside ? kBackground[c] : 0.0) + blob * kBlobTint[c] + noise(rng);
            s.image[(c * image_size + y) * image_size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      out.push_back(std::move(s));
    }
  }
  return out;
}

void export_dataset(const Dataset& data, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream labels(fs::path(dir) / "labels.csv");
  if (!labels) throw std::runtime_error("cannot write labels.csv under '" + dir + "'");
  labels << "id_code,diagnosis\n";
  for (const auto& s : data) {
    const std::size_t h = s.image.dim(1), w = s.image.dim(2);
    RawImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize(w * h * 3);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          img.pixels[(y * w + x) * 3 + c] =
              static_cast<std::uint8_t>(std::lround(std::clamp(s.image[(c * h + y) * w + x], 0.0f, 1.0f) * 255.0f));
    write_ppm((fs::path(dir) / (s.id + ".ppm")).string(), img);
    labels << s.id << ',' << s.stage << '\n';
  }
}

Tensor<float> stack_images(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  const auto& first = data.at(indices[0]).image;
  const std::size_t c = first.dim(0), h = first.dim(1), w = first.dim(2), per = c * h * w;
  Tensor<float> out({indices.size(), c, h, w});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& img = data.at(indices[i]).image;
    if (img.shape() != first.shape()) throw std::invalid_argument("stack_images: mixed image sizes in one batch");
    std::copy_n(img.raw(), per, out.raw() + i * per);
  }
  return out;
}

}  // namespace msed

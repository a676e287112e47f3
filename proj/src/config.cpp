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

#include "msed/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace msed {

const char* phase_name(PhaseKind kind) {
  switch (kind) {
    case PhaseKind::kClassification:
      return "classification";
    case PhaseKind::kRegression:
      return "regression";
    case PhaseKind::kFusion:
      return "fusion";
  }
  return "?";
}

TrainPhase TrainPhase::classification() {
  TrainPhase p;
  p.kind = PhaseKind::kClassification;
  p.optimizer = OptimizerKind::kSgd;
  p.epochs = 250;
  p.batch_size = 2;
  p.schedule = LrSchedule::classification();
  p.loss = LossKind::kCrossEntropy;
  p.class_weighted = true;
  return p;
}

TrainPhase TrainPhase::regression() {
  TrainPhase p;
  p.kind = PhaseKind::kRegression;
  p.optimizer = OptimizerKind::kAdam;
  p.epochs = 50;
  p.batch_size = 2;
  p.schedule = LrSchedule::regression();
  p.loss = LossKind::kMse;
  p.class_weighted = false;  // weighting belongs to the classification loss only
  return p;
}

TrainPhase TrainPhase::fusion() {
  TrainPhase p;
  p.kind = PhaseKind::kFusion;
  p.optimizer = OptimizerKind::kAdam;
  p.epochs = 50;
  p.batch_size = 2;
  p.schedule = LrSchedule::fusion();
  p.loss = LossKind::kCrossEntropy;
  p.class_weighted = true;
  return p;
}

void TrainPhase::validate() const {
  const std::string n = phase_name(kind);
  if (epochs < 1) throw std::invalid_argument(n + " phase: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument(n + " phase: batch_size must be >= 1");
  if (!(l2 >= 0)) throw std::invalid_argument(n + " phase: l2 must be >= 0");
  if ((kind == PhaseKind::kRegression) != (loss == LossKind::kMse))
    throw std::invalid_argument(n + " phase: regression uses MSE, the other phases cross-entropy");
  if (optimizer == OptimizerKind::kSgd && !schedule.base_momentum)
    throw std::invalid_argument(n + " phase: SGD needs a momentum");
  schedule.validate();
}

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.profile = "desk";
  c.spec = NetworkSpec::desk();
  for (TrainPhase* p : {&c.cls, &c.reg, &c.fusion}) p->batch_size = 8;
  c.cls.epochs = 30;
  c.reg.epochs = 15;
  c.fusion.epochs = 15;
  // At 32x32 every resampled image is visibly smoothed, which moves the
  // frozen backbones' pooled features by up to ~2 std. An MLP fitted only on
  // augmented features then misreads clean validation features.
  c.fusion.augment = false;
  return c;
}

PipelineConfig PipelineConfig::paper() {
  PipelineConfig c;
  c.profile = "paper";
  c.spec = NetworkSpec::paper();
  return c;
}

PipelineConfig PipelineConfig::profile_named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw std::invalid_argument("unknown profile '" + name + "' (expected desk or paper)");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

template <typename I>
I to_int(const std::string& key, const std::string& v) {
  I out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size())
    throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

// "150:0.0001,200:0.00001:0.5"
std::vector<StepRule> parse_steps(const std::string& key, const std::string& v) {
  std::vector<StepRule> out;
  if (v == "none") return out;
  for (const auto& item : split_list(v, ',')) {
    auto parts = split_list(item, ':');
    if (parts.size() < 2 || parts.size() > 3)
      throw std::invalid_argument("config key '" + key + "': expected after_epoch:lr[:momentum], got '" + item + "'");
    StepRule r{to_int<int>(key, parts[0]), to_double(key, parts[1]), std::nullopt};
    if (parts.size() == 3) r.momentum = to_double(key, parts[2]);
    out.push_back(r);
  }
  return out;
}

std::string format_steps(const std::vector<StepRule>& steps) {
  if (steps.empty()) return "none";
  std::string s;
  for (const auto& r : steps) {
    if (!s.empty()) s += ',';
    s += std::to_string(r.after_epoch) + ':' + fmt(r.lr);
    if (r.momentum) s += ':' + fmt(*r.momentum);
  }
  return s;
}

std::optional<PlateauRule> parse_plateau(const std::string& key, const std::string& v) {
  if (v == "none") return std::nullopt;
  auto parts = split_list(v, ':');
  if (parts.size() != 2) throw std::invalid_argument("config key '" + key + "': expected patience:factor or none");
  return PlateauRule{to_int<int>(key, parts[0]), to_double(key, parts[1])};
}

std::map<int, std::size_t> parse_caps(const std::string& key, const std::string& v) {
  std::map<int, std::size_t> out;
  if (v == "none") return out;
  for (const auto& item : split_list(v, ',')) {
    auto parts = split_list(item, ':');
    if (parts.size() != 2) throw std::invalid_argument("config key '" + key + "': expected stage:count, got '" + item + "'");
    out[to_int<int>(key, parts[0])] = to_int<std::size_t>(key, parts[1]);
  }
  return out;
}

std::string format_caps(const std::map<int, std::size_t>& caps) {
  if (caps.empty()) return "none";
  std::string s;
  for (const auto& [stage, cap] : caps) s += (s.empty() ? "" : ",") + std::to_string(stage) + ':' + std::to_string(cap);
  return s;
}

const char* b(bool v) { return v ? "true" : "false"; }

struct PhaseRef {
  const char* prefix;
  TrainPhase PipelineConfig::*member;
};
constexpr PhaseRef kPhases[] = {
    {"cls", &PipelineConfig::cls}, {"reg", &PipelineConfig::reg}, {"fusion", &PipelineConfig::fusion}};

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k = {
        {"profile", "base profile: desk | paper"},
        {"seed", "master seed (u64); all streams derive from it"},
        {"strict_determinism", "pin every numeric library to one thread"},
        {"output_dir", "directory for checkpoints, histories and reports"},
        {"data.source", "synthetic | directory"},
        {"data.root", "image directory (<id>.png or <id>.ppm)"},
        {"data.labels", "labels CSV with header id_code,diagnosis"},
        {"data.train_fraction", "random train share for directory data"},
        {"data.cap_class", "per-stage caps, e.g. 0:10000, or none"},
        {"synth.train_per_class", "synthetic training images per stage"},
        {"synth.val_per_class", "synthetic validation images per stage"},
        {"model.growth_rate", "k, channels added per dense module before compression"},
        {"model.modules_per_block", "L, SE-dense modules per block"},
        {"model.dense_blocks", "B, number of dense blocks"},
        {"model.compression", "theta in (0,1]"},
        {"model.se_ratio", "squeeze-excitation reduction ratio r"},
        {"model.input_size", "square input side (sets height and width)"},
        {"augment.rotation_deg", "max rotation, sampled in [-v, v]"},
        {"augment.h_flip", "horizontal flip probability"},
        {"augment.width_shift", "max horizontal shift as a fraction of width"},
        {"augment.height_shift", "max vertical shift as a fraction of height"},
        {"augment.zoom", "max zoom fraction, sampled in [-v, v]"},
        {"augment.shear_deg", "max shear angle"},
    };
    static const char* phase_keys[][2] = {
        {"optimizer", "sgd | adam"},
        {"epochs", "number of epochs"},
        {"batch_size", "minibatch size"},
        {"lr", "base learning rate"},
        {"momentum", "base SGD momentum"},
        {"steps", "step rules after_epoch:lr[:momentum],... or none"},
        {"plateau", "reduce-on-plateau patience:factor or none"},
        {"class_weighted", "weight the loss by inverse class frequency"},
        {"augment", "apply random augmentation to training images"},
        {"l2", "L2 penalty on kernels"},
    };
    static std::vector<std::string> names;  // stable storage for the composed keys
    names.reserve(std::size(kPhases) * std::size(phase_keys));
    for (const auto& ph : kPhases)
      for (const auto& pk : phase_keys) {
        names.push_back(std::string(ph.prefix) + "." + pk[0]);
        k.push_back({names.back().c_str(), pk[1]});
      }
    return k;
  }();
  return keys;
}

void PipelineConfig::set(const std::string& key, const std::string& v) {
  if (key == "profile") {
    if (v != profile) throw std::invalid_argument("config key 'profile' must come first and name the base profile");
    return;
  }
  if (key == "seed") return void(seed = to_int<std::uint64_t>(key, v));
  if (key == "strict_determinism") return void(strict_determinism = to_bool(key, v));
  if (key == "output_dir") return void(output_dir = v);
  if (key == "data.source") {
    if (v == "synthetic")
      data.source = DataSource::kSynthetic;
    else if (v == "directory")
      data.source = DataSource::kDirectory;
    else
      throw std::invalid_argument("config key 'data.source': expected synthetic or directory, got '" + v + "'");
    return;
  }
  if (key == "data.root") return void(data.root = v);
  if (key == "data.labels") return void(data.labels = v);
  if (key == "data.train_fraction") return void(data.train_fraction = to_double(key, v));
  if (key == "data.cap_class") return void(data.cap_class = parse_caps(key, v));
  if (key == "synth.train_per_class") return void(data.synth_train_per_class = to_int<std::size_t>(key, v));
  if (key == "synth.val_per_class") return void(data.synth_val_per_class = to_int<std::size_t>(key, v));
  if (key == "model.growth_rate") return void(spec.growth_rate = to_int<int>(key, v));
  if (key == "model.modules_per_block") return void(spec.modules_per_block = to_int<int>(key, v));
  if (key == "model.dense_blocks") return void(spec.dense_blocks = to_int<int>(key, v));
  if (key == "model.compression") return void(spec.compression = to_double(key, v));
  if (key == "model.se_ratio") return void(spec.se_ratio = to_int<int>(key, v));
  if (key == "model.input_size") return void(spec.input_h = spec.input_w = to_int<std::size_t>(key, v));
  auto sym = [&](Range& r) {
    const double m = to_double(key, v);
    r = Range{-m, m};
  };
  if (key == "augment.rotation_deg") return sym(augment.rotation_deg);
  if (key == "augment.h_flip") return void(augment.h_flip = to_double(key, v));
  if (key == "augment.width_shift") return sym(augment.width_shift);
  if (key == "augment.height_shift") return sym(augment.height_shift);
  if (key == "augment.zoom") return sym(augment.zoom);
  if (key == "augment.shear_deg") return sym(augment.shear_deg);

  const auto dot = key.find('.');
  if (dot != std::string::npos) {
    const std::string prefix = key.substr(0, dot), field = key.substr(dot + 1);
    for (const auto& ph : kPhases) {
      if (prefix != ph.prefix) continue;
      TrainPhase& p = this->*ph.member;
      if (field == "optimizer") {
        if (v == "sgd")
          p.optimizer = OptimizerKind::kSgd;
        else if (v == "adam")
          p.optimizer = OptimizerKind::kAdam;
        else
          throw std::invalid_argument("config key '" + key + "': expected sgd or adam, got '" + v + "'");
        return;
      }
      if (field == "epochs") return void(p.epochs = to_int<int>(key, v));
      if (field == "batch_size") return void(p.batch_size = to_int<std::size_t>(key, v));
      if (field == "lr") return void(p.schedule.base_lr = to_double(key, v));
      if (field == "momentum") return void(p.schedule.base_momentum = to_double(key, v));
      if (field == "steps") return void(p.schedule.steps = parse_steps(key, v));
      if (field == "plateau") return void(p.schedule.plateau = parse_plateau(key, v));
      if (field == "class_weighted") return void(p.class_weighted = to_bool(key, v));
      if (field == "augment") return void(p.augment = to_bool(key, v));
      if (field == "l2") return void(p.l2 = to_double(key, v));
    }
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> PipelineConfig::to_pairs() const {
  std::vector<std::pair<std::string, std::string>> out = {
      {"profile", profile},
      {"seed", std::to_string(seed)},
      {"strict_determinism", b(strict_determinism)},
      {"output_dir", output_dir},
      {"data.source", data.source == DataSource::kSynthetic ? "synthetic" : "directory"},
      {"data.root", data.root},
      {"data.labels", data.labels},
      {"data.train_fraction", fmt(data.train_fraction)},
      {"data.cap_class", format_caps(data.cap_class)},
      {"synth.train_per_class", std::to_string(data.synth_train_per_class)},
      {"synth.val_per_class", std::to_string(data.synth_val_per_class)},
      {"model.growth_rate", std::to_string(spec.growth_rate)},
      {"model.modules_per_block", std::to_string(spec.modules_per_block)},
      {"model.dense_blocks", std::to_string(spec.dense_blocks)},
      {"model.compression", fmt(spec.compression)},
      {"model.se_ratio", std::to_string(spec.se_ratio)},
      {"model.input_size", std::to_string(spec.input_h)},
      {"augment.rotation_deg", fmt(augment.rotation_deg.hi)},
      {"augment.h_flip", fmt(augment.h_flip)},
      {"augment.width_shift", fmt(augment.width_shift.hi)},
      {"augment.height_shift", fmt(augment.height_shift.hi)},
      {"augment.zoom", fmt(augment.zoom.hi)},
      {"augment.shear_deg", fmt(augment.shear_deg.hi)},
  };
  for (const auto& ph : kPhases) {
    const TrainPhase& p = this->*ph.member;
    const std::string pre = std::string(ph.prefix) + ".";
    out.emplace_back(pre + "optimizer", p.optimizer == OptimizerKind::kSgd ? "sgd" : "adam");
    out.emplace_back(pre + "epochs", std::to_string(p.epochs));
    out.emplace_back(pre + "batch_size", std::to_string(p.batch_size));
    out.emplace_back(pre + "lr", fmt(p.schedule.base_lr));
    out.emplace_back(pre + "momentum", p.schedule.base_momentum ? fmt(*p.schedule.base_momentum) : "0");
    out.emplace_back(pre + "steps", format_steps(p.schedule.steps));
    out.emplace_back(pre + "plateau", p.schedule.plateau ? std::to_string(p.schedule.plateau->patience) + ":" +
                                                              fmt(p.schedule.plateau->factor)
                                                        : "none");
    out.emplace_back(pre + "class_weighted", b(p.class_weighted));
    out.emplace_back(pre + "augment", b(p.augment));
    out.emplace_back(pre + "l2", fmt(p.l2));
  }
  return out;
}

void PipelineConfig::write(std::ostream& out) const {
  for (const auto& [k, v] : to_pairs()) out << k << " = " << v << '\n';
}

void PipelineConfig::validate() const {
  spec.validate();
  if (spec.input_h < 8 || spec.input_w < 8) throw std::invalid_argument("config: input size must be at least 8x8");
  if (spec.head != HeadKind::kClassification)
    throw std::invalid_argument("config: the model spec describes the classification backbone");
  augment.validate();
  cls.validate();
  reg.validate();
  fusion.validate();
  if (cls.kind != PhaseKind::kClassification || reg.kind != PhaseKind::kRegression || fusion.kind != PhaseKind::kFusion)
    throw std::invalid_argument("config: phase kinds are fixed per slot");
  if (data.source == DataSource::kDirectory) {
    if (data.root.empty() || data.labels.empty())
      throw std::invalid_argument("config: directory data needs data.root and data.labels");
    if (!(data.train_fraction > 0 && data.train_fraction < 1))
      throw std::invalid_argument("config: data.train_fraction must be in (0,1)");
  } else {
    if (spec.input_h != spec.input_w || spec.input_h < 16)
      throw std::invalid_argument("config: synthetic data needs a square input of at least 16");
    if (data.synth_train_per_class == 0 || data.synth_val_per_class == 0)
      throw std::invalid_argument("config: synthetic splits must be non-empty");
  }
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::istream& in, const std::string& origin) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t n = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    s.erase(s.find_last_not_of(ws) + 1);
    s.erase(0, s.find_first_not_of(ws));
    return s;
  };
  while (std::getline(in, line)) {
    ++n;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(n);
    if (eq == std::string::npos) throw std::invalid_argument(where + ": expected key = value");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument(where + ": empty key");
    if (!seen.insert(key).second) throw std::invalid_argument(where + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

PipelineConfig load_config(const std::string& path, const std::string& profile_override) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  const auto pairs = parse_config_text(in, path);
  std::string profile = profile_override;
  if (profile.empty())
    for (const auto& [k, v] : pairs)
      if (k == "profile") profile = v;
  PipelineConfig c = PipelineConfig::profile_named(profile.empty() ? "desk" : profile);
  for (const auto& [k, v] : pairs) {
    if (k == "profile") continue;
    try {
      c.set(k, v);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ": " + e.what());
    }
  }
  return c;
}

}  // namespace msed

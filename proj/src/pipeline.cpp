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

#include "msed/pipeline.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "msed/ops.hpp"
#include "msed/optim.hpp"

namespace msed {

namespace fs = std::filesystem;

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t x = seed ^ h;
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<double> History::val_losses() const {
  std::vector<double> out;
  for (const auto& e : epochs) out.push_back(e.val_loss);
  return out;
}

std::string History::to_jsonl() const {
  std::ostringstream os;
  for (const auto& e : epochs) {
    nlohmann::json j = {{"phase", phase_name(kind)},       {"epoch", e.epoch},
                        {"lr", e.lr},                      {"plateau_reductions", e.plateau_reductions},
                        {"train_loss", e.train_loss},      {"val_loss", e.val_loss},
                        {"val_metric", e.val_metric},      {"improved", e.improved}};
    if (e.momentum) j["momentum"] = *e.momentum;
    os << j.dump() << '\n';
  }
  return os.str();
}

namespace {

// ---------------------------------------------------------------------------
// Small helpers shared by the phases.

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot take_snapshot(const ParameterList<float>& params, const BufferList<float>& buffers) {
  Snapshot s;
  for (const auto& p : params) s.params.emplace_back(p.value.data().begin(), p.value.data().end());
  for (const auto& b : buffers) s.buffers.push_back(*b.values);
  return s;
}

void restore_snapshot(const Snapshot& s, ParameterList<float>& params, BufferList<float>& buffers) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(s.params[i].begin(), s.params[i].end(), params[i].value.raw());
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].values = s.buffers[i];
}

// SGD or Adam behind one interface, driven by the schedule.
class PhaseOptimizer {
 public:
  PhaseOptimizer(const TrainPhase& phase, ParameterList<float> params) : kind_(phase.optimizer) {
    if (kind_ == OptimizerKind::kSgd)
      sgd_.emplace(std::move(params), SgdConfig{phase.schedule.base_lr, phase.schedule.base_momentum.value_or(0), phase.l2});
    else
      adam_.emplace(std::move(params), AdamConfig{phase.schedule.base_lr, 0.9, 0.999, 1e-8, phase.l2});
  }
  void apply(const ScheduleValues& v) {
    if (sgd_) {
      sgd_->set_lr(v.lr);
      if (v.momentum) sgd_->set_momentum(*v.momentum);
    } else {
      adam_->set_lr(v.lr);
    }
  }
  void zero_grad() { sgd_ ? sgd_->zero_grad() : adam_->zero_grad(); }
  void step() { sgd_ ? sgd_->step() : adam_->step(); }

  void export_state(CheckpointFile& ckpt) const {
    auto add = [&](const std::string& group, const ParameterList<float>& params,
                   const std::vector<std::vector<float>>& state) {
      for (std::size_t i = 0; i < params.size() && i < state.size(); ++i)
        ckpt.tensors.push_back({"optim/" + group + "/" + params[i].name, params[i].value.shape(), state[i]});
    };
    if (sgd_) {
      ckpt.meta["optim.kind"] = "sgd";
      ckpt.meta["optim.lr"] = std::to_string(sgd_->config().lr);
      ckpt.meta["optim.momentum"] = std::to_string(sgd_->config().momentum);
      add("velocity", sgd_->params(), sgd_->velocity());
    } else {
      auto& a = const_cast<Adam<float>&>(*adam_);
      ckpt.meta["optim.kind"] = "adam";
      ckpt.meta["optim.lr"] = std::to_string(a.config().lr);
      ckpt.meta["optim.steps"] = std::to_string(a.steps());
      add("m", a.params(), a.first_moment());
      add("v", a.params(), a.second_moment());
    }
  }

 private:
  OptimizerKind kind_;
  std::optional<Sgd<float>> sgd_;
  std::optional<Adam<float>> adam_;
};

std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_images(const Dataset& data, const NetworkSpec& spec, const char* what) {
  const Shape want{spec.input_c, spec.input_h, spec.input_w};
  for (const auto& s : data)
    if (s.image.shape() != want)
      throw std::invalid_argument(std::string(what) + ": image '" + s.id + "' is " + shape_str(s.image.shape()) +
                                  " but the model expects " + shape_str(want));
}

// [n,C,H,W] batch, each image optionally augmented from its own stream.
Tensor<float> make_batch(const Dataset& data, std::span<const std::size_t> idx, const AugmentPolicy* policy,
                         std::uint64_t seed, std::uint64_t epoch) {
  if (!policy || policy->is_identity()) return stack_images(data, idx);
  const auto& first = data.at(idx[0]).image;
  const std::size_t per = first.numel();
  Shape shape{idx.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = data.at(idx[i]);
    auto rng = sample_stream(seed, s.id, epoch);
    const auto aug = augment(s, *policy, rng);
    std::copy_n(aug.image.raw(), per, out.raw() + i * per);
  }
  return out;
}

Tensor<float> gather_rows(const Tensor<float>& m, std::span<const std::size_t> idx) {
  const std::size_t d = m.dim(1);
  Tensor<float> out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.raw() + idx[i] * d, d, out.raw() + i * d);
  return out;
}

std::vector<int> stages_of(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (auto i : idx) out.push_back(data[i].stage);
  return out;
}

Tensor<float> targets_of(const Dataset& data, std::span<const std::size_t> idx) {
  Tensor<float> t({idx.size(), 1});
  for (std::size_t i = 0; i < idx.size(); ++i) t[i] = static_cast<float>(data[idx[i]].regression_target);
  return t;
}

int argmax_row(const Tensor<float>& m, std::size_t row) {
  const std::size_t d = m.dim(1);
  const float* p = m.raw() + row * d;
  return static_cast<int>(std::max_element(p, p + d) - p);
}

std::vector<double> training_weights(const Dataset& train, const TrainPhase& phase) {
  if (!phase.class_weighted) return {};
  const auto hist = stage_histogram(train);
  for (std::size_t s = 0; s < hist.size(); ++s)
    if (hist[s] == 0)
      throw std::invalid_argument(std::string(phase_name(phase.kind)) + " phase: stage " + std::to_string(s) +
                                  " has no training samples, so class weights are undefined");
  return class_weights(hist).w;
}

// Re-runs a forward pass with a probe attached and names the first layer
// whose output contains NaN or Inf.
std::string first_nonfinite_layer(const std::function<void()>& forward) {
  std::string first;
  ProbeScope<float> scope([&](const std::string& name, const Tensor<float>& t) {
    if (first.empty() && !all_finite(t)) first = name;
  });
  NoGradGuard no_grad;
  forward();
  return first.empty() ? "loss (all layer outputs finite)" : first;
}

[[noreturn]] void throw_nonfinite(PhaseKind kind, int epoch, std::size_t batch, const std::string& layer) {
  throw std::runtime_error(std::string(phase_name(kind)) + " phase: non-finite loss at epoch " +
                           std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           "; first non-finite layer output: " + layer);
}

bool better(double candidate, double best, bool higher) {
  if (!std::isfinite(candidate)) return false;
  return higher ? candidate > best : candidate < best;
}

double cross_entropy_value(const Tensor<float>& logits, const std::vector<int>& labels) {
  const auto probs = softmax(logits);
  const auto onehot = one_hot<float>(labels, static_cast<int>(logits.dim(1)));
  return static_cast<double>(cross_entropy(probs, onehot).item());
}

// The shared epoch loop: schedule, shuffled minibatches, validation,
// checkpoint-on-best and best-snapshot restore.
struct LoopSpec {
  const TrainPhase& phase;
  std::size_t n_train;
  std::uint64_t seed;
  bool higher_is_better;
  PhaseOptimizer& optim;
  ParameterList<float>& params;
  BufferList<float>& buffers;
  std::function<void(int epoch)> begin_epoch;
  std::function<double(std::span<const std::size_t>, int epoch, std::size_t batch)> train_batch;  // returns loss
  std::function<std::pair<double, double>()> validate;  // (val_loss, val_metric)
  std::function<void(CheckpointFile&)> fill_checkpoint;
};

History run_loop(const LoopSpec& spec, const TrainHooks& hooks) {
  History h;
  h.kind = spec.phase.kind;
  h.higher_is_better = spec.higher_is_better;
  h.best_metric = spec.higher_is_better ? -std::numeric_limits<double>::infinity()
                                        : std::numeric_limits<double>::infinity();
  std::mt19937_64 shuffle_rng(derive_seed(spec.seed, "shuffle"));
  Snapshot best = take_snapshot(spec.params, spec.buffers);
  auto order = iota_indices(spec.n_train);
  const std::size_t bs = spec.phase.batch_size;

  for (int epoch = 1; epoch <= spec.phase.epochs; ++epoch) {
    const auto losses = h.val_losses();
    const auto sv = spec.phase.schedule.at(epoch, losses);
    spec.optim.apply(sv);
    if (spec.begin_epoch) spec.begin_epoch(epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += bs, ++batch_no) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      loss_sum += spec.train_batch(idx, epoch, batch_no) * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sv.lr;
    rec.momentum = sv.momentum;
    rec.plateau_reductions = sv.plateau_reductions;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    std::tie(rec.val_loss, rec.val_metric) = spec.validate();
    rec.improved = better(rec.val_metric, h.best_metric, spec.higher_is_better);
    if (rec.improved) {
      h.best_metric = rec.val_metric;
      h.best_epoch = epoch;
      best = take_snapshot(spec.params, spec.buffers);
      if (!hooks.checkpoint_path.empty()) {
        CheckpointFile ckpt;
        spec.fill_checkpoint(ckpt);
        spec.optim.export_state(ckpt);
        ckpt.meta["phase"] = phase_name(spec.phase.kind);
        ckpt.meta["epoch"] = std::to_string(epoch);
        ckpt.meta["best_metric"] = nlohmann::json(rec.val_metric).dump();
        ckpt.meta["rng"] = rng_state(shuffle_rng);
        write_checkpoint(hooks.checkpoint_path, ckpt);
      }
    }
    h.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  restore_snapshot(best, spec.params, spec.buffers);
  return h;
}

void copy_into(const NamedTensor& src, Tensor<float>& dst) {
  if (src.shape != dst.shape())
    throw CheckpointError("checkpoint: shape mismatch for '" + src.name + "': file has " + shape_str(src.shape) +
                         ", spec expects " + shape_str(dst.shape()));
  std::copy(src.values.begin(), src.values.end(), dst.raw());
}

const NamedTensor& require(const CheckpointFile& ckpt, const std::string& name) {
  const auto* t = ckpt.find(name);
  if (!t) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

void append_params(CheckpointFile& ckpt, const ParameterList<float>& params, BufferList<float> buffers,
                   const std::string& prefix) {
  for (const auto& p : params)
    ckpt.tensors.push_back({prefix + p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
  for (const auto& b : buffers) ckpt.tensors.push_back({prefix + b.name, {b.values->size()}, *b.values});
}

void restore_params(const CheckpointFile& ckpt, ParameterList<float> params, BufferList<float> buffers,
                    const std::string& prefix) {
  for (auto& p : params) copy_into(require(ckpt, prefix + p.name), p.value);
  for (auto& b : buffers) {
    const auto& t = require(ckpt, prefix + b.name);
    if (t.values.size() != b.values->size())
      throw CheckpointError("checkpoint: shape mismatch for buffer '" + t.name + "'");
    *b.values = t.values;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

SplitData prepare_data(const PipelineConfig& config) {
  SplitData out;
  const auto& spec = config.spec;
  if (config.data.source == DataSource::kSynthetic) {
    out.train = synth_generate(config.data.synth_train_per_class, spec.input_h, derive_seed(config.seed, "synth.train"));
    out.val = synth_generate(config.data.synth_val_per_class, spec.input_h, derive_seed(config.seed, "synth.val"));
    for (auto& s : out.val) s.id = "val_" + s.id;
    return out;
  }
  LoadOptions opt;
  opt.cap_class = config.data.cap_class;
  opt.seed = derive_seed(config.seed, "cap");
  const auto raw = load_dataset(config.data.root, config.data.labels, opt);
  const auto all = resize_normalize(raw, spec.input_h, spec.input_w);
  auto [train, val] = split(all, config.data.train_fraction, derive_seed(config.seed, "split"));
  out.train = std::move(train);
  out.val = std::move(val);
  return out;
}

SeDenseNet<float> make_backbone(const NetworkSpec& spec, HeadKind head, std::uint64_t seed) {
  NetworkSpec s = spec;
  s.head = head;
  std::mt19937_64 rng(seed);
  return build_sedensenet<float>(s, rng);
}

History train_backbone(SeDenseNet<float>& net, const Dataset& train, const Dataset& val, const TrainPhase& phase,
                       const AugmentPolicy& augment, std::uint64_t seed, const TrainHooks& hooks) {
  phase.validate();
  if (phase.kind == PhaseKind::kFusion) throw std::invalid_argument("train_backbone: use train_fusion for the fusion phase");
  const bool regression = phase.kind == PhaseKind::kRegression;
  if ((net.spec().head == HeadKind::kRegression) != regression)
    throw std::invalid_argument(std::string("train_backbone: ") + phase_name(phase.kind) + " phase needs a " +
                                (regression ? "regression" : "classification") + " head");
  if (train.empty() || val.empty()) throw std::invalid_argument("train_backbone: empty train or validation split");
  check_images(train, net.spec(), "train_backbone");
  check_images(val, net.spec(), "train_backbone");
  if (phase.augment) augment.validate();

  auto params = net.parameters();
  auto buffers = net.buffers();
  PhaseOptimizer optim(phase, params);
  const auto weights = regression ? std::vector<double>{} : training_weights(train, phase);
  const std::uint64_t aug_seed = derive_seed(seed, "augment");
  const int classes = net.spec().num_classes;

  LoopSpec loop{phase, train.size(), seed, !regression, optim, params, buffers, {}, {}, {}, {}};
  loop.train_batch = [&](std::span<const std::size_t> idx, int epoch, std::size_t batch_no) {
    const auto x = make_batch(train, idx, phase.augment ? &augment : nullptr, aug_seed, static_cast<std::uint64_t>(epoch));
    auto out = net.forward(x, true);
    Tensor<float> loss;
    if (regression) {
      loss = mse(out.output, targets_of(train, idx));
    } else {
      const auto labels = stages_of(train, idx);
      loss = cross_entropy(softmax(out.output), one_hot<float>(labels, classes), weights);
    }
    const double value = loss.item();
    if (!std::isfinite(value))
      throw_nonfinite(phase.kind, epoch, batch_no, first_nonfinite_layer([&] { net.forward(x, true); }));
    optim.zero_grad();
    loss.backward();
    optim.step();
    return value;
  };
  loop.validate = [&]() -> std::pair<double, double> {
    const auto fs = extract_features(net, val);
    const auto all = iota_indices(val.size());
    if (regression) {
      const double m = mse(fs.outputs, targets_of(val, all)).item();
      return {m, m};
    }
    const auto labels = stages_of(val, all);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) correct += argmax_row(fs.outputs, i) == labels[i];
    return {cross_entropy_value(fs.outputs, labels), static_cast<double>(correct) / static_cast<double>(val.size())};
  };
  loop.fill_checkpoint = [&](CheckpointFile& ckpt) {
    ckpt.meta["kind"] = "backbone";
    append_backbone(ckpt, net, "");
  };
  return run_loop(loop, hooks);
}

FusionModel::FusionModel(SeDenseNet<float> cls_net, SeDenseNet<float> reg_net, std::uint64_t mlp_seed)
    : FusionModel(cls_net, reg_net, [&] {
        std::mt19937_64 rng(mlp_seed);
        return build_fusion_mlp<float>(cls_net.feature_dim(), reg_net.feature_dim(), cls_net.spec().num_classes, rng);
      }()) {}

FusionModel::FusionModel(SeDenseNet<float> cls_net, SeDenseNet<float> reg_net, FusionMlp<float> fusion)
    : cls(std::move(cls_net)), reg(std::move(reg_net)), mlp(std::move(fusion)) {
  const auto& a = cls.spec();
  const auto& b = reg.spec();
  if (a.head != HeadKind::kClassification || b.head != HeadKind::kRegression)
    throw std::invalid_argument("fusion: expects a classification and a regression backbone");
  if (a.input_h != b.input_h || a.input_w != b.input_w || a.input_c != b.input_c)
    throw std::invalid_argument("fusion: backbones were built for different input sizes (" +
                                std::to_string(a.input_h) + "x" + std::to_string(a.input_w) + " vs " +
                                std::to_string(b.input_h) + "x" + std::to_string(b.input_w) + ")");
  if (mlp.cls_dim() != cls.feature_dim() || mlp.reg_dim() != reg.feature_dim())
    throw std::invalid_argument("fusion: MLP input widths do not match the backbone feature widths");
}

FeatureSet extract_features(SeDenseNet<float>& net, const Dataset& data, const AugmentPolicy* augment,
                            std::uint64_t seed, std::uint64_t epoch, std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("extract_features: empty dataset");
  NoGradGuard no_grad;
  FeatureSet out;
  const std::size_t n = data.size();
  const auto all = iota_indices(n);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::span<const std::size_t> idx(all.data() + start, std::min(batch_size, n - start));
    const auto r = net.forward(make_batch(data, idx, augment, seed, epoch), false);
    if (!out.features.defined()) {
      out.features = Tensor<float>({n, r.features.dim(1)});
      out.outputs = Tensor<float>({n, r.output.dim(1)});
    }
    std::copy_n(r.features.raw(), r.features.numel(), out.features.raw() + start * r.features.dim(1));
    std::copy_n(r.output.raw(), r.output.numel(), out.outputs.raw() + start * r.output.dim(1));
  }
  return out;
}

History train_fusion(FusionModel& model, const Dataset& train, const Dataset& val, const TrainPhase& phase,
                     const AugmentPolicy& augment, std::uint64_t seed, const TrainHooks& hooks) {
  phase.validate();
  if (phase.kind != PhaseKind::kFusion) throw std::invalid_argument("train_fusion: expects the fusion phase");
  if (train.empty() || val.empty()) throw std::invalid_argument("train_fusion: empty train or validation split");
  check_images(train, model.cls.spec(), "train_fusion");
  check_images(val, model.cls.spec(), "train_fusion");
  if (phase.augment) augment.validate();

  auto params = model.mlp.parameters();
  auto buffers = model.mlp.buffers();
  PhaseOptimizer optim(phase, params);
  const auto weights = training_weights(train, phase);
  const std::uint64_t aug_seed = derive_seed(seed, "augment");
  const int classes = model.cls.spec().num_classes;

  // Backbones stay frozen: features come from inference-mode passes with
  // gradient recording off, and only MLP parameters reach the optimizer.
  const auto val_cls = extract_features(model.cls, val).features;
  const auto val_reg = extract_features(model.reg, val).features;
  Tensor<float> train_cls, train_reg;
  auto refresh = [&](int epoch) {
    const AugmentPolicy* policy = phase.augment && !augment.is_identity() ? &augment : nullptr;
    if (!policy && train_cls.defined()) return;
    train_cls = extract_features(model.cls, train, policy, aug_seed, static_cast<std::uint64_t>(epoch)).features;
    train_reg = extract_features(model.reg, train, policy, aug_seed, static_cast<std::uint64_t>(epoch)).features;
  };

  LoopSpec loop{phase, train.size(), seed, true, optim, params, buffers, refresh, {}, {}, {}};
  loop.train_batch = [&](std::span<const std::size_t> idx, int epoch, std::size_t batch_no) {
    const auto cf = gather_rows(train_cls, idx), rf = gather_rows(train_reg, idx);
    const auto labels = stages_of(train, idx);
    const auto logits = model.mlp.forward(cf, rf, true);
    auto loss = cross_entropy(softmax(logits), one_hot<float>(labels, classes), weights);
    const double value = loss.item();
    if (!std::isfinite(value))
      throw_nonfinite(phase.kind, epoch, batch_no, first_nonfinite_layer([&] { model.mlp.forward(cf, rf, true); }));
    optim.zero_grad();
    loss.backward();
    optim.step();
    return value;
  };
  loop.validate = [&]() -> std::pair<double, double> {
    NoGradGuard no_grad;
    const auto logits = model.mlp.forward(val_cls, val_reg, false);
    const auto labels = stages_of(val, iota_indices(val.size()));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < val.size(); ++i) correct += argmax_row(logits, i) == labels[i];
    return {cross_entropy_value(logits, labels), static_cast<double>(correct) / static_cast<double>(val.size())};
  };
  loop.fill_checkpoint = [&](CheckpointFile& ckpt) {
    ckpt.meta["kind"] = "fusion";
    append_backbone(ckpt, model.cls, "cls/");
    append_backbone(ckpt, model.reg, "reg/");
    ckpt.meta["mlp.cls_dim"] = std::to_string(model.mlp.cls_dim());
    ckpt.meta["mlp.reg_dim"] = std::to_string(model.mlp.reg_dim());
    append_params(ckpt, model.mlp.parameters(), model.mlp.buffers(), "mlp/");
  };
  return run_loop(loop, hooks);
}

std::vector<Prediction> predict_batch(FusionModel& model, const Tensor<float>& x) {
  const auto& spec = model.cls.spec();
  if (x.rank() != 4 || x.dim(1) != spec.input_c || x.dim(2) != spec.input_h || x.dim(3) != spec.input_w)
    throw std::invalid_argument("predict: expected input [N," + std::to_string(spec.input_c) + "," +
                                std::to_string(spec.input_h) + "," + std::to_string(spec.input_w) + "], got " +
                                shape_str(x.shape()));
  NoGradGuard no_grad;
  const auto c = model.cls.forward(x, false);
  const auto r = model.reg.forward(x, false);
  const auto logits = model.mlp.forward(c.features, r.features, false);
  const std::size_t m = logits.dim(1);
  std::vector<Prediction> out(x.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const float* row = logits.raw() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0;
    out[i].probs.resize(m);
    for (std::size_t j = 0; j < m; ++j) z += out[i].probs[j] = std::exp(static_cast<double>(row[j]) - mx);
    for (auto& p : out[i].probs) p /= z;
    out[i].stage = static_cast<int>(std::max_element(out[i].probs.begin(), out[i].probs.end()) - out[i].probs.begin());
    out[i].severity = r.output[i];
  }
  return out;
}

Prediction predict(FusionModel& model, const Tensor<float>& image) {
  if (image.rank() != 3) throw std::invalid_argument("predict: expected one image [C,H,W], got " + shape_str(image.shape()));
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return predict_batch(model, image.reshape(s)).front();
}

namespace {
Evaluation finish_evaluation(ConfusionMatrix cm, const std::vector<double>& sev_sum,
                             const std::vector<std::size_t>& sev_n) {
  Evaluation e{std::move(cm), {}, {}};
  e.report = compute_report(e.cm);
  for (std::size_t s = 0; s < sev_sum.size(); ++s)
    e.severity_mean.push_back(sev_n[s] ? sev_sum[s] / static_cast<double>(sev_n[s])
                                       : std::numeric_limits<double>::quiet_NaN());
  return e;
}
}  // namespace

Evaluation evaluate(FusionModel& model, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty split");
  check_images(data, model.cls.spec(), "evaluate");
  const auto c = extract_features(model.cls, data);
  const auto r = extract_features(model.reg, data);
  NoGradGuard no_grad;
  const auto logits = model.mlp.forward(c.features, r.features, false);
  ConfusionMatrix cm(static_cast<std::size_t>(model.cls.spec().num_classes));
  std::vector<double> sev(kNumStages, 0);
  std::vector<std::size_t> n(kNumStages, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    cm.accumulate(data[i].stage, argmax_row(logits, i));
    sev[static_cast<std::size_t>(data[i].stage)] += r.outputs[i];
    ++n[static_cast<std::size_t>(data[i].stage)];
  }
  return finish_evaluation(std::move(cm), sev, n);
}

Evaluation evaluate_classifier(SeDenseNet<float>& net, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty split");
  if (net.spec().head != HeadKind::kClassification) throw std::invalid_argument("evaluate: not a classification backbone");
  check_images(data, net.spec(), "evaluate");
  const auto c = extract_features(net, data);
  ConfusionMatrix cm(static_cast<std::size_t>(net.spec().num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) cm.accumulate(data[i].stage, argmax_row(c.outputs, i));
  return finish_evaluation(std::move(cm), std::vector<double>(kNumStages, 0), std::vector<std::size_t>(kNumStages, 0));
}

std::vector<double> severity_means(SeDenseNet<float>& reg, const Dataset& data) {
  if (reg.spec().head != HeadKind::kRegression) throw std::invalid_argument("severity_means: not a regression backbone");
  const auto r = extract_features(reg, data);
  std::vector<double> sum(kNumStages, 0);
  std::vector<std::size_t> n(kNumStages, 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    sum[static_cast<std::size_t>(data[i].stage)] += r.outputs[i];
    ++n[static_cast<std::size_t>(data[i].stage)];
  }
  std::vector<double> out;
  for (std::size_t s = 0; s < sum.size(); ++s)
    out.push_back(n[s] ? sum[s] / static_cast<double>(n[s]) : std::numeric_limits<double>::quiet_NaN());
  return out;
}

// ---------------------------------------------------------------------------
// Persistence.

void append_backbone(CheckpointFile& ckpt, SeDenseNet<float>& net, const std::string& prefix) {
  for (const auto& [k, v] : net.spec().to_map()) ckpt.meta[prefix + "spec." + k] = v;
  append_params(ckpt, net.parameters(), net.buffers(), prefix);
}

SeDenseNet<float> restore_backbone(const CheckpointFile& ckpt, const std::string& prefix) {
  std::map<std::string, std::string> kv;
  const std::string key_prefix = prefix + "spec.";
  for (const auto& [k, v] : ckpt.meta)
    if (k.rfind(key_prefix, 0) == 0) kv[k.substr(key_prefix.size())] = v;
  NetworkSpec spec;
  try {
    spec = NetworkSpec::from_map(kv);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad embedded network spec: ") + e.what());
  }
  auto net = make_backbone(spec, spec.head, 0);
  restore_params(ckpt, net.parameters(), net.buffers(), prefix);
  return net;
}

void save_backbone(const std::string& path, SeDenseNet<float>& net, const std::map<std::string, std::string>& meta) {
  CheckpointFile ckpt;
  ckpt.meta = meta;
  ckpt.meta["kind"] = "backbone";
  append_backbone(ckpt, net, "");
  write_checkpoint(path, ckpt);
}

SeDenseNet<float> load_backbone(const std::string& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.meta_at("kind") != "backbone")
    throw CheckpointError(path + ": holds a '" + ckpt.meta_at("kind") + "' model, not a single backbone");
  return restore_backbone(ckpt, "");
}

void save_checkpoint(FusionModel& model, const std::string& path, const std::map<std::string, std::string>& meta) {
  CheckpointFile ckpt;
  ckpt.meta = meta;
  ckpt.meta["kind"] = "fusion";
  append_backbone(ckpt, model.cls, "cls/");
  append_backbone(ckpt, model.reg, "reg/");
  ckpt.meta["mlp.cls_dim"] = std::to_string(model.mlp.cls_dim());
  ckpt.meta["mlp.reg_dim"] = std::to_string(model.mlp.reg_dim());
  append_params(ckpt, model.mlp.parameters(), model.mlp.buffers(), "mlp/");
  write_checkpoint(path, ckpt);
}

FusionModel load_checkpoint(const std::string& path) {
  const auto ckpt = read_checkpoint(path);
  if (ckpt.meta_at("kind") != "fusion")
    throw CheckpointError(path + ": holds a '" + ckpt.meta_at("kind") + "' model, not a fusion model");
  auto cls = restore_backbone(ckpt, "cls/");
  auto reg = restore_backbone(ckpt, "reg/");
  std::mt19937_64 rng(0);
  auto mlp = build_fusion_mlp<float>(std::stoul(ckpt.meta_at("mlp.cls_dim")), std::stoul(ckpt.meta_at("mlp.reg_dim")),
                                     cls.spec().num_classes, rng);
  restore_params(ckpt, mlp.parameters(), mlp.buffers(), "mlp/");
  return FusionModel(std::move(cls), std::move(reg), std::move(mlp));
}

// ---------------------------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

std::string severity_line(const std::vector<double>& means) {
  std::ostringstream os;
  os << "mean severity by stage:";
  os.setf(std::ios::fixed);
  os.precision(4);
  for (double m : means) os << ' ' << m;
  return os.str();
}

}  // namespace

MultitaskResult train_multitask(const PipelineConfig& config, const RunOptions& options) {
  config.validate();
  return train_multitask(config, prepare_data(config), options);
}

MultitaskResult train_multitask(const PipelineConfig& config, const SplitData& data, const RunOptions& options) {
  config.validate();
  if (config.strict_determinism) Eigen::setNbThreads(1);
  auto log = [&](const std::string& s) {
    if (options.log) options.log(s);
  };
  const fs::path dir(config.output_dir);
  if (options.write_outputs) {
    fs::create_directories(dir);
    std::ofstream cfg(dir / "config.txt");
    config.write(cfg);
  }
  auto hooks_for = [&](const char* name) {
    TrainHooks h;
    if (options.write_outputs) h.checkpoint_path = (dir / (std::string(name) + ".ckpt")).string();
    h.on_epoch = [&, name](const EpochRecord& r) {
      std::ostringstream os;
      os << name << " epoch " << r.epoch << " lr " << r.lr << " train_loss " << r.train_loss << " val_loss "
         << r.val_loss << " val_metric " << r.val_metric << (r.improved ? " *" : "");
      log(os.str());
    };
    return h;
  };

  log("data: " + std::to_string(data.train.size()) + " train / " + std::to_string(data.val.size()) + " val");
  // The two backbones draw from separate seed streams, so their order does not matter.
  auto cls = make_backbone(config.spec, HeadKind::kClassification, derive_seed(config.seed, "cls.init"));
  auto cls_hist = train_backbone(cls, data.train, data.val, config.cls, config.augment,
                                 derive_seed(config.seed, "cls.train"), hooks_for("cls"));
  auto reg = make_backbone(config.spec, HeadKind::kRegression, derive_seed(config.seed, "reg.init"));
  auto reg_hist = train_backbone(reg, data.train, data.val, config.reg, config.augment,
                                 derive_seed(config.seed, "reg.train"), hooks_for("reg"));

  FusionModel model(cls, reg, derive_seed(config.seed, "mlp.init"));
  auto fusion_hist = train_fusion(model, data.train, data.val, config.fusion, config.augment,
                                  derive_seed(config.seed, "fusion.train"), hooks_for("fusion"));
  auto fusion_eval = evaluate(model, data.val);
  auto cls_eval = evaluate_classifier(model.cls, data.val);
  log("fusion val accuracy " + std::to_string(fusion_eval.report.accuracy) + ", classification-only " +
      std::to_string(cls_eval.report.accuracy));
  log(severity_line(fusion_eval.severity_mean));

  if (options.write_outputs) {
    save_checkpoint(model, (dir / "model.ckpt").string(), {{"seed", std::to_string(config.seed)}});
    write_text(dir / "history.jsonl", cls_hist.to_jsonl() + reg_hist.to_jsonl() + fusion_hist.to_jsonl());
    std::ostringstream cm;
    fusion_eval.cm.to_csv(cm);
    write_text(dir / "confusion.csv", cm.str());
    write_text(dir / "report.txt", format_report_text(fusion_eval.cm, fusion_eval.report) + "\n" +
                                       severity_line(fusion_eval.severity_mean) + "\n");
    write_text(dir / "report.jsonl", format_report_jsonl(fusion_eval.report));
  }
  return MultitaskResult{std::move(model), std::move(cls_hist), std::move(reg_hist), std::move(fusion_hist),
                         std::move(fusion_eval), std::move(cls_eval)};
}

double random_regression_fusion_accuracy(MultitaskResult& trained, const PipelineConfig& config,
                                         const SplitData& data) {
  auto random_reg = make_backbone(config.spec, HeadKind::kRegression, derive_seed(config.seed, "ablation.reg.init"));
  FusionModel model(trained.model.cls, random_reg, derive_seed(config.seed, "mlp.init"));
  train_fusion(model, data.train, data.val, config.fusion, config.augment, derive_seed(config.seed, "fusion.train"));
  return evaluate(model, data.val).report.accuracy;
}

AblationSummary summarize_ablation(std::vector<AblationRow> rows) {
  AblationSummary s;
  s.rows = std::move(rows);
  if (s.rows.empty()) return s;
  for (const auto& r : s.rows) {
    s.mean_cls_only += r.cls_only_accuracy;
    s.mean_fusion += r.fusion_accuracy;
    s.mean_random_reg += r.random_reg_fusion_accuracy;
  }
  const double n = static_cast<double>(s.rows.size());
  s.mean_cls_only /= n;
  s.mean_fusion /= n;
  s.mean_random_reg /= n;
  return s;
}

std::string AblationSummary::to_text() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "seed  cls_only  fusion  fusion_random_reg\n";
  for (const auto& r : rows)
    os << r.seed << "  " << r.cls_only_accuracy << "  " << r.fusion_accuracy << "  " << r.random_reg_fusion_accuracy
       << '\n';
  os << "mean  " << mean_cls_only << "  " << mean_fusion << "  " << mean_random_reg << '\n';
  os << "delta fusion - cls_only = " << std::showpos << delta() << std::noshowpos << '\n';
  return os.str();
}

}  // namespace msed

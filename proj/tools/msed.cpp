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

// Command-line front end: training phases, evaluation, prediction, metrics
// and synthetic data export.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "msed/image_io.hpp"
#include "msed/pipeline.hpp"

namespace fs = std::filesystem;
using namespace msed;

namespace {

struct GlobalOptions {
  std::string config_file;
  std::string profile;
  std::optional<std::uint64_t> seed;
  bool strict = false;
  std::vector<std::string> overrides;  // key=value
  std::string output_dir;
  bool quiet = false;
};

PipelineConfig build_config(const GlobalOptions& g) {
  PipelineConfig c = g.config_file.empty() ? PipelineConfig::profile_named(g.profile.empty() ? "desk" : g.profile)
                                           : load_config(g.config_file, g.profile);
  if (g.seed) c.seed = *g.seed;
  if (g.strict) c.strict_determinism = true;
  if (!g.output_dir.empty()) c.output_dir = g.output_dir;
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

class Logger {
 public:
  explicit Logger(bool quiet) : quiet_(quiet), start_(std::chrono::steady_clock::now()) {}
  void operator()(std::string_view msg) const {
    if (quiet_) return;
    const auto s = std::chrono::duration_cast<std::chrono::seconds>(std::chrono::steady_clock::now() - start_);
    std::cerr << "[" << s.count() << "s] " << msg << "\n";
  }
  TrainHooks hooks(const std::string& name, const std::string& ckpt) const {
    TrainHooks h;
    h.checkpoint_path = ckpt;
    h.on_epoch = [this, name](const EpochRecord& r) {
      std::ostringstream os;
      os << name << " epoch " << r.epoch << " lr " << r.lr << " train_loss " << r.train_loss << " val_loss "
         << r.val_loss << " val_metric " << r.val_metric << (r.improved ? " *" : "");
      (*this)(os.str());
    };
    return h;
  }

 private:
  bool quiet_;
  std::chrono::steady_clock::time_point start_;
};

void print_evaluation(const Evaluation& e, bool jsonl) {
  std::cout << format_report_text(e.cm, e.report);
  const bool has_severity =
      std::any_of(e.severity_mean.begin(), e.severity_mean.end(), [](double v) { return std::isfinite(v); });
  if (has_severity) {
    std::cout << "mean severity by stage:";
    for (double v : e.severity_mean) std::cout << " " << std::fixed << std::setprecision(4) << v;
    std::cout << "\n";
  }
  if (jsonl) std::cout << format_report_jsonl(e.report);
}

void write_history(const fs::path& dir, const std::string& name, const History& h) {
  std::ofstream(dir / (name + ".history.jsonl")) << h.to_jsonl();
}

int train_single(const GlobalOptions& g, HeadKind head) {
  const auto config = build_config(g);
  Logger log(g.quiet);
  const bool cls = head == HeadKind::kClassification;
  const std::string name = cls ? "cls" : "reg";
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  const auto data = prepare_data(config);
  log("data: " + std::to_string(data.train.size()) + " train / " + std::to_string(data.val.size()) + " val");
  auto net = make_backbone(config.spec, head, derive_seed(config.seed, name + ".init"));
  const auto ckpt = (dir / (name + ".ckpt")).string();
  const auto h = train_backbone(net, data.train, data.val, cls ? config.cls : config.reg, config.augment,
                                derive_seed(config.seed, name + ".train"), log.hooks(name, ckpt));
  write_history(dir, name, h);
  std::cout << name << ": best epoch " << h.best_epoch << ", validation " << (cls ? "accuracy " : "MSE ")
            << h.best_metric << "\ncheckpoint: " << ckpt << "\n";
  if (cls) print_evaluation(evaluate_classifier(net, data.val), false);
  else {
    std::cout << "mean severity by stage:";
    for (double v : severity_means(net, data.val)) std::cout << " " << std::fixed << std::setprecision(4) << v;
    std::cout << "\n";
  }
  return 0;
}

int train_fusion_cmd(const GlobalOptions& g, const std::string& cls_path, const std::string& reg_path) {
  const auto config = build_config(g);
  Logger log(g.quiet);
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  const auto data = prepare_data(config);
  FusionModel model(load_backbone(cls_path), load_backbone(reg_path), derive_seed(config.seed, "mlp.init"));
  const auto h = train_fusion(model, data.train, data.val, config.fusion, config.augment,
                              derive_seed(config.seed, "fusion.train"),
                              log.hooks("fusion", (dir / "fusion.ckpt").string()));
  write_history(dir, "fusion", h);
  const auto out = (dir / "model.ckpt").string();
  save_checkpoint(model, out, {{"seed", std::to_string(config.seed)}});
  std::cout << "fusion: best epoch " << h.best_epoch << ", validation accuracy " << h.best_metric
            << "\ncheckpoint: " << out << "\n";
  print_evaluation(evaluate(model, data.val), false);
  return 0;
}

int train_all(const GlobalOptions& g) {
  const auto config = build_config(g);
  Logger log(g.quiet);
  RunOptions opt;
  opt.log = [&](std::string_view s) { log(s); };
  auto result = train_multitask(config, opt);
  std::cout << "outputs: " << config.output_dir << "\n";
  print_evaluation(result.fusion_eval, false);
  std::cout << "classification-only accuracy: " << result.cls_only_eval.report.accuracy << "\n";
  return 0;
}

int evaluate_cmd(const GlobalOptions& g, const std::string& model_path, bool jsonl) {
  const auto config = build_config(g);
  auto model = load_checkpoint(model_path);
  if (model.cls.spec().input_h != config.spec.input_h || model.cls.spec().input_w != config.spec.input_w)
    throw std::invalid_argument("checkpoint input size " + std::to_string(model.cls.spec().input_h) + "x" +
                                std::to_string(model.cls.spec().input_w) + " differs from the configured data size " +
                                std::to_string(config.spec.input_h) + "x" + std::to_string(config.spec.input_w));
  const auto data = prepare_data(config);
  print_evaluation(evaluate(model, data.val), jsonl);
  return 0;
}

int predict_cmd(const std::string& model_path, const std::vector<std::string>& images) {
  auto model = load_checkpoint(model_path);
  const auto& spec = model.cls.spec();
  std::cout << "image,stage,severity,p0,p1,p2,p3,p4\n";
  for (const auto& path : images) {
    RawSample raw{fs::path(path).stem().string(), read_image(path), 0};
    const auto sample = resize_normalize(raw, spec.input_h, spec.input_w);
    const auto p = predict(model, sample.image);
    std::cout << path << "," << p.stage << "," << std::setprecision(6) << p.severity;
    for (double v : p.probs) std::cout << "," << v;
    std::cout << "\n";
  }
  return 0;
}

int metrics_cmd(const std::string& csv, bool json_only) {
  const auto cm = ConfusionMatrix::from_csv_file(csv);
  const auto report = compute_report(cm);
  if (!json_only) std::cout << format_report_text(cm, report) << "\n";
  std::cout << format_report_jsonl(report);
  return 0;
}

int config_cmd(const GlobalOptions& g, bool keys) {
  if (keys) {
    for (const auto& k : config_keys()) std::cout << std::left << std::setw(26) << k.key << k.help << "\n";
    return 0;
  }
  build_config(g).write(std::cout);
  return 0;
}

int synth_cmd(const GlobalOptions& g, const std::string& out, std::size_t per_class, std::size_t size) {
  const auto seed = g.seed.value_or(1);
  const auto data = synth_generate(per_class, size, seed);
  export_dataset(data, out);
  std::cout << "wrote " << data.size() << " images and labels.csv to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multitask SE-DenseNet retinopathy grading"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--profile", g.profile, "base profile")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "master seed");
  app.add_flag("--strict-determinism", g.strict, "single-threaded, bit-reproducible run");
  app.add_option("--set", g.overrides, "override one config key (key=value), repeatable");
  app.add_option("--out", g.output_dir, "output directory (config key output_dir)");
  app.add_flag("-q,--quiet", g.quiet, "no per-epoch progress on stderr");
  app.fallthrough();

  auto* cls = app.add_subcommand("train-cls", "phase 1: train the classification backbone");
  auto* reg = app.add_subcommand("train-reg", "phase 2: train the regression backbone");

  auto* fusion = app.add_subcommand("train-fusion", "phase 3: train the fusion classifier on two frozen backbones");
  std::string cls_ckpt, reg_ckpt;
  fusion->add_option("--cls", cls_ckpt, "classification backbone checkpoint")->required()->check(CLI::ExistingFile);
  fusion->add_option("--reg", reg_ckpt, "regression backbone checkpoint")->required()->check(CLI::ExistingFile);

  auto* all = app.add_subcommand("train-all", "all three phases, then evaluation");

  auto* eval = app.add_subcommand("evaluate", "confusion matrix and report on the validation split");
  std::string model_path;
  bool jsonl = false;
  eval->add_option("--model", model_path, "fusion model checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_flag("--jsonl", jsonl, "also print JSON lines");

  auto* pred = app.add_subcommand("predict", "stage probabilities and severity for image files");
  std::vector<std::string> images;
  pred->add_option("--model", model_path, "fusion model checkpoint")->required()->check(CLI::ExistingFile);
  pred->add_option("images", images, "PNG or PPM files")->required()->check(CLI::ExistingFile);

  auto* met = app.add_subcommand("metrics", "report for a confusion matrix CSV (rows = actual)");
  std::string cm_csv;
  bool json_only = false;
  met->add_option("--cm", cm_csv, "N x N integer CSV")->required()->check(CLI::ExistingFile);
  met->add_flag("--json", json_only, "JSON lines only");

  auto* synth = app.add_subcommand("synth-data", "write a synthetic labeled dataset");
  std::string synth_out;
  std::size_t per_class = 200, size = 32;
  synth->add_option("--out-dir", synth_out, "destination directory")->required();
  synth->add_option("--per-class", per_class, "images per stage")->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "image side in pixels")->check(CLI::Range(16, 4096));

  auto* cfg = app.add_subcommand("config", "print the effective configuration");
  bool list_keys = false;
  cfg->add_flag("--keys", list_keys, "list every config key with a description instead");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*cls) return train_single(g, HeadKind::kClassification);
    if (*reg) return train_single(g, HeadKind::kRegression);
    if (*fusion) return train_fusion_cmd(g, cls_ckpt, reg_ckpt);
    if (*all) return train_all(g);
    if (*eval) return evaluate_cmd(g, model_path, jsonl);
    if (*pred) return predict_cmd(model_path, images);
    if (*met) return metrics_cmd(cm_csv, json_only);
    if (*synth) return synth_cmd(g, synth_out, per_class, size);
    if (*cfg) return config_cmd(g, list_keys);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

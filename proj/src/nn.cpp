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

#include "msed/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "msed/optim.hpp"

namespace msed {

const char* head_name(HeadKind head) { return head == HeadKind::kClassification ? "classification" : "regression"; }

HeadKind parse_head(const std::string& name) {
  if (name == "classification") return HeadKind::kClassification;
  if (name == "regression") return HeadKind::kRegression;
  throw std::invalid_argument("unknown head kind '" + name + "'");
}

NetworkSpec NetworkSpec::paper() { return NetworkSpec{}; }

NetworkSpec NetworkSpec::desk() {
  NetworkSpec s;
  s.growth_rate = 6;
  s.modules_per_block = 2;
  s.dense_blocks = 2;
  s.compression = 0.5;
  s.se_ratio = 4;
  s.input_h = s.input_w = 32;
  return s;
}

void NetworkSpec::validate() const {
  if (growth_rate < 1 || modules_per_block < 1 || dense_blocks < 1)
    throw std::invalid_argument("network spec: growth rate, modules per block and dense blocks must be >= 1");
  if (!(compression > 0 && compression <= 1)) throw std::invalid_argument("network spec: compression must be in (0,1]");
  if (se_ratio < 1) throw std::invalid_argument("network spec: se ratio must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("network spec: num_classes must be >= 1");
  if (input_c < 1 || input_h < 1 || input_w < 1) throw std::invalid_argument("network spec: empty input shape");
  if (filters_per_module() < 1)
    throw std::invalid_argument("network spec: 2 * growth_rate * compression rounds to zero filters");
  const std::size_t need = min_input_size();
  if (input_h < need || input_w < need)
    throw std::invalid_argument("network spec: input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                                " collapses under " + std::to_string(dense_blocks - 1) +
                                " transition halvings; minimum input size is " + std::to_string(need) + "x" +
                                std::to_string(need));
}

std::size_t NetworkSpec::stem_filters() const { return static_cast<std::size_t>(2 * growth_rate); }

std::size_t NetworkSpec::filters_per_module() const {
  return static_cast<std::size_t>(std::floor(2.0 * growth_rate * compression + 1e-9));
}

std::size_t NetworkSpec::transition_channels(std::size_t in_channels) const {
  auto c = static_cast<std::size_t>(std::floor(static_cast<double>(in_channels) * compression + 1e-9));
  return std::max<std::size_t>(1, c);
}

std::size_t NetworkSpec::min_input_size() const { return std::size_t{1} << (dense_blocks - 1); }

std::map<std::string, std::string> NetworkSpec::to_map() const {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return {{"growth_rate", std::to_string(growth_rate)},
          {"modules_per_block", std::to_string(modules_per_block)},
          {"dense_blocks", std::to_string(dense_blocks)},
          {"compression", num(compression)},
          {"se_ratio", std::to_string(se_ratio)},
          {"input_h", std::to_string(input_h)},
          {"input_w", std::to_string(input_w)},
          {"input_c", std::to_string(input_c)},
          {"num_classes", std::to_string(num_classes)},
          {"head", head_name(head)}};
}

NetworkSpec NetworkSpec::from_map(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument("network spec: missing key '" + key + "'");
    return it->second;
  };
  NetworkSpec s;
  s.growth_rate = std::stoi(get("growth_rate"));
  s.modules_per_block = std::stoi(get("modules_per_block"));
  s.dense_blocks = std::stoi(get("dense_blocks"));
  s.compression = std::stod(get("compression"));
  s.se_ratio = std::stoi(get("se_ratio"));
  s.input_h = std::stoul(get("input_h"));
  s.input_w = std::stoul(get("input_w"));
  s.input_c = std::stoul(get("input_c"));
  s.num_classes = std::stoi(get("num_classes"));
  s.head = parse_head(get("head"));
  return s;
}

std::vector<std::size_t> ChannelPlan::boundary_sequence() const {
  std::vector<std::size_t> seq{stem};
  for (std::size_t i = 0; i < block_out.size(); ++i) {
    seq.push_back(block_out[i]);
    if (i < transition_out.size()) seq.push_back(transition_out[i]);
  }
  return seq;
}

ChannelPlan plan_channels(const NetworkSpec& spec) {
  ChannelPlan plan;
  plan.stem = spec.stem_filters();
  std::size_t c = plan.stem;
  for (int b = 0; b < spec.dense_blocks; ++b) {
    c += static_cast<std::size_t>(spec.modules_per_block) * spec.filters_per_module();
    plan.block_out.push_back(c);
    if (b + 1 < spec.dense_blocks) {
      c = spec.transition_channels(c);
      plan.transition_out.push_back(c);
    }
  }
  plan.feature_dim = c;
  return plan;
}

std::size_t se_reduced_channels(std::size_t channels, int ratio) {
  return std::max<std::size_t>(1, channels / static_cast<std::size_t>(ratio));
}

// Probe plumbing.

namespace {
template <typename T>
LayerProbe<T>& current_probe() {
  thread_local LayerProbe<T> probe;
  return probe;
}
}  // namespace

template <typename T>
ProbeScope<T>::ProbeScope(LayerProbe<T> probe) : previous_(std::move(current_probe<T>())) {
  current_probe<T>() = std::move(probe);
}

template <typename T>
ProbeScope<T>::~ProbeScope() {
  current_probe<T>() = std::move(previous_);
}

template <typename T>
void emit_probe(const std::string& name, const Tensor<T>& t) {
  auto& probe = current_probe<T>();
  if (probe) probe(name, t);
}

// Layers.

template <typename T>
Conv2dLayer<T>::Conv2dLayer(std::string name, std::size_t in_channels, std::size_t filters, std::size_t kernel,
                            bool with_bias, std::mt19937_64& rng)
    : name_(std::move(name)),
      weight_(he_normal_init<T>({filters, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng)) {
  if (with_bias) bias_ = Tensor<T>::zeros({filters}, true);
}

template <typename T>
Tensor<T> Conv2dLayer<T>::forward(const Tensor<T>& x) const {
  auto y = conv2d(x, weight_, bias_, 1, Padding::kSame);
  emit_probe(name_, y);
  return y;
}

template <typename T>
void Conv2dLayer<T>::parameters(ParameterList<T>& out) const {
  out.push_back({name_ + ".w", weight_, true});
  if (bias_.defined()) out.push_back({name_ + ".b", bias_, false});
}

template <typename T>
BatchNormLayer<T>::BatchNormLayer(std::string name, std::size_t channels, double momentum)
    : name_(std::move(name)),
      gamma_(Tensor<T>::full({channels}, T(1), true)),
      beta_(Tensor<T>::zeros({channels}, true)),
      stats_(channels),
      momentum_(momentum) {}

template <typename T>
Tensor<T> BatchNormLayer<T>::forward(const Tensor<T>& x, bool training) {
  auto y = batch_norm(x, gamma_, beta_, stats_, momentum_, training);
  emit_probe(name_, y);
  return y;
}

template <typename T>
void BatchNormLayer<T>::parameters(ParameterList<T>& out) const {
  out.push_back({name_ + ".gamma", gamma_, false});
  out.push_back({name_ + ".beta", beta_, false});
}

template <typename T>
void BatchNormLayer<T>::buffers(BufferList<T>& out) {
  out.push_back({name_ + ".running_mean", &stats_.mean});
  out.push_back({name_ + ".running_var", &stats_.var});
}

template <typename T>
DenseLayer<T>::DenseLayer(std::string name, std::size_t in_features, std::size_t units, std::mt19937_64& rng)
    : name_(std::move(name)),
      weight_(he_normal_init<T>({in_features, units}, in_features, rng)),
      bias_(Tensor<T>::zeros({units}, true)) {}

template <typename T>
Tensor<T> DenseLayer<T>::forward(const Tensor<T>& x) const {
  auto y = dense(x, weight_, bias_);
  emit_probe(name_, y);
  return y;
}

template <typename T>
void DenseLayer<T>::parameters(ParameterList<T>& out) const {
  out.push_back({name_ + ".w", weight_, true});
  out.push_back({name_ + ".b", bias_, false});
}

template <typename T>
SeBlock<T>::SeBlock(std::string name, std::size_t channels, int ratio, std::mt19937_64& rng)
    : name_(name),
      reduce_(name + ".reduce", channels, se_reduced_channels(channels, ratio), rng),
      expand_(name + ".expand", se_reduced_channels(channels, ratio), channels, rng) {}

template <typename T>
Tensor<T> SeBlock<T>::gates(const Tensor<T>& x) const {
  return sigmoid(expand_.forward(relu(reduce_.forward(global_avg_pool(x)))));
}

template <typename T>
Tensor<T> SeBlock<T>::forward(const Tensor<T>& x) const {
  auto y = scale_channels(x, gates(x));
  emit_probe(name_, y);
  return y;
}

template <typename T>
void SeBlock<T>::parameters(ParameterList<T>& out) const {
  reduce_.parameters(out);
  expand_.parameters(out);
}

template <typename T>
SeDenseModule<T>::SeDenseModule(std::string name, std::size_t in_channels, std::size_t filters, int se_ratio,
                                std::mt19937_64& rng)
    : name_(name),
      in_channels_(in_channels),
      bn_(name + ".bn", in_channels),
      conv_(name + ".conv", in_channels, filters, 3, false, rng),
      se_(name + ".se", filters, se_ratio, rng) {}

template <typename T>
Tensor<T> SeDenseModule<T>::forward(const Tensor<T>& x, bool training) {
  auto fresh = se_.forward(conv_.forward(relu(bn_.forward(x, training))));
  return concat(x, fresh);
}

template <typename T>
void SeDenseModule<T>::parameters(ParameterList<T>& out) const {
  bn_.parameters(out);
  conv_.parameters(out);
  se_.parameters(out);
}

template <typename T>
void SeDenseModule<T>::buffers(BufferList<T>& out) {
  bn_.buffers(out);
}

template <typename T>
DenseBlock<T>::DenseBlock(std::string name, std::size_t in_channels, std::size_t modules, std::size_t filters,
                          int se_ratio, std::mt19937_64& rng)
    : name_(name), out_channels_(in_channels) {
  modules_.reserve(modules);
  for (std::size_t i = 0; i < modules; ++i) {
    modules_.emplace_back(name + ".m" + std::to_string(i), out_channels_, filters, se_ratio, rng);
    out_channels_ = modules_.back().out_channels();
  }
}

template <typename T>
Tensor<T> DenseBlock<T>::forward(const Tensor<T>& x, bool training) {
  Tensor<T> h = x;
  for (auto& m : modules_) h = m.forward(h, training);
  emit_probe(name_, h);
  return h;
}

template <typename T>
void DenseBlock<T>::parameters(ParameterList<T>& out) const {
  for (const auto& m : modules_) m.parameters(out);
}

template <typename T>
void DenseBlock<T>::buffers(BufferList<T>& out) {
  for (auto& m : modules_) m.buffers(out);
}

template <typename T>
TransitionBlock<T>::TransitionBlock(std::string name, std::size_t in_channels, std::size_t out_channels, int se_ratio,
                                    std::mt19937_64& rng)
    : name_(name),
      bn_(name + ".bn", in_channels),
      conv_(name + ".conv", in_channels, out_channels, 1, false, rng),
      se_(name + ".se", out_channels, se_ratio, rng) {}

template <typename T>
Tensor<T> TransitionBlock<T>::forward(const Tensor<T>& x, bool training) {
  if (x.dim(2) < 2 || x.dim(3) < 2)
    throw std::invalid_argument(name_ + ": spatial dims " + std::to_string(x.dim(2)) + "x" +
                                std::to_string(x.dim(3)) + " too small for 2x2 pooling");
  auto y = avg_pool2d(se_.forward(conv_.forward(relu(bn_.forward(x, training)))), 2, 2);
  emit_probe(name_, y);
  return y;
}

template <typename T>
void TransitionBlock<T>::parameters(ParameterList<T>& out) const {
  bn_.parameters(out);
  conv_.parameters(out);
  se_.parameters(out);
}

template <typename T>
void TransitionBlock<T>::buffers(BufferList<T>& out) {
  bn_.buffers(out);
}

template <typename T>
SeDenseNet<T>::SeDenseNet(const NetworkSpec& spec, std::mt19937_64& rng) : spec_(spec) {
  spec_.validate();
  const std::size_t f = spec_.filters_per_module();
  stem_ = Conv2dLayer<T>("stem", spec_.input_c, spec_.stem_filters(), 3, false, rng);
  std::size_t c = spec_.stem_filters();
  blocks_.reserve(spec_.dense_blocks);
  transitions_.reserve(spec_.dense_blocks);
  for (int b = 0; b < spec_.dense_blocks; ++b) {
    blocks_.emplace_back("block" + std::to_string(b), c, spec_.modules_per_block, f, spec_.se_ratio, rng);
    c = blocks_.back().out_channels();
    if (b + 1 < spec_.dense_blocks) {
      transitions_.emplace_back("trans" + std::to_string(b), c, spec_.transition_channels(c), spec_.se_ratio, rng);
      c = transitions_.back().out_channels();
    }
  }
  final_bn_ = BatchNormLayer<T>("final.bn", c);
  head_ = DenseLayer<T>("head", c, spec_.output_units(), rng);
}

template <typename T>
BackboneOutput<T> SeDenseNet<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != spec_.input_c || x.dim(2) != spec_.input_h || x.dim(3) != spec_.input_w)
    throw std::invalid_argument("sedensenet: expected input [N," + std::to_string(spec_.input_c) + "," +
                                std::to_string(spec_.input_h) + "," + std::to_string(spec_.input_w) + "], got " +
                                shape_str(x.shape()));
  Tensor<T> h = stem_.forward(x);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = blocks_[b].forward(h, training);
    if (b < transitions_.size()) h = transitions_[b].forward(h, training);
  }
  h = relu(final_bn_.forward(h, training));
  BackboneOutput<T> out;
  out.features = global_avg_pool(h);
  emit_probe(std::string("pool"), out.features);
  out.output = head_.forward(out.features);
  return out;
}

template <typename T>
Tensor<T> SeDenseNet<T>::predict(const Tensor<T>& x) {
  NoGradGuard guard;
  auto out = forward(x, false);
  return spec_.head == HeadKind::kClassification ? softmax(out.output) : out.output;
}

template <typename T>
ParameterList<T> SeDenseNet<T>::parameters() const {
  ParameterList<T> out;
  stem_.parameters(out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].parameters(out);
    if (b < transitions_.size()) transitions_[b].parameters(out);
  }
  final_bn_.parameters(out);
  head_.parameters(out);
  return out;
}

template <typename T>
BufferList<T> SeDenseNet<T>::buffers() {
  BufferList<T> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].buffers(out);
    if (b < transitions_.size()) transitions_[b].buffers(out);
  }
  final_bn_.buffers(out);
  return out;
}

template <typename T>
std::size_t SeDenseNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value.numel();
  return n;
}

template <typename T>
SeDenseNet<T> build_sedensenet(const NetworkSpec& spec, std::mt19937_64& rng) {
  return SeDenseNet<T>(spec, rng);
}

template <typename T>
FusionMlp<T>::FusionMlp(std::size_t cls_feature_dim, std::size_t reg_feature_dim, int num_classes,
                        std::mt19937_64& rng, std::size_t hidden)
    : cls_dim_(cls_feature_dim),
      reg_dim_(reg_feature_dim),
      bn_("mlp.bn", cls_feature_dim + reg_feature_dim, 0.9),
      hidden_("mlp.hidden", cls_feature_dim + reg_feature_dim, hidden, rng),
      out_("mlp.out", hidden, static_cast<std::size_t>(num_classes), rng) {
  if (cls_feature_dim == 0 || reg_feature_dim == 0 || num_classes < 1)
    throw std::invalid_argument("fusion mlp: feature dims and class count must be positive");
}

template <typename T>
Tensor<T> FusionMlp<T>::forward(const Tensor<T>& cls_features, const Tensor<T>& reg_features, bool training) {
  if (cls_features.rank() != 2 || reg_features.rank() != 2 || cls_features.dim(1) != cls_dim_ ||
      reg_features.dim(1) != reg_dim_)
    throw std::invalid_argument("fusion mlp: expected features [N," + std::to_string(cls_dim_) + "] and [N," +
                                std::to_string(reg_dim_) + "], got " + shape_str(cls_features.shape()) + " and " +
                                shape_str(reg_features.shape()));
  auto h = bn_.forward(concat(cls_features, reg_features), training);
  h = relu(hidden_.forward(h));
  return out_.forward(h);
}

template <typename T>
ParameterList<T> FusionMlp<T>::parameters() const {
  ParameterList<T> out;
  bn_.parameters(out);
  hidden_.parameters(out);
  out_.parameters(out);
  return out;
}

template <typename T>
BufferList<T> FusionMlp<T>::buffers() {
  BufferList<T> out;
  bn_.buffers(out);
  return out;
}

template <typename T>
FusionMlp<T> build_fusion_mlp(std::size_t cls_feature_dim, std::size_t reg_feature_dim, int num_classes,
                              std::mt19937_64& rng) {
  return FusionMlp<T>(cls_feature_dim, reg_feature_dim, num_classes, rng);
}

// Losses.

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: expects [N,K] logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<T> out(n * k);
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.raw() + r * k;
    T* p = out.data() + r * k;
    T zmax = *std::max_element(z, z + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j) s += (p[j] = std::exp(z[j] - zmax));
    for (std::size_t j = 0; j < k; ++j) p[j] /= s;
  }
  return make_result<T>({n, k}, std::move(out), "softmax", {logits}, [n, k](detail::Node<T>& node) {
    auto& in = *node.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const T* p = node.data.data() + r * k;
      const T* dy = node.grad.data() + r * k;
      T dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += dy[j] * p[j];
      for (std::size_t j = 0; j < k; ++j) g[r * k + j] += p[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& probs, const Tensor<T>& onehot, std::span<const double> class_weights) {
  if (probs.rank() != 2 || probs.shape() != onehot.shape())
    throw std::invalid_argument("cross_entropy: shape mismatch " + shape_str(probs.shape()) + " vs " +
                                shape_str(onehot.shape()));
  const std::size_t n = probs.dim(0), m = probs.dim(1);
  if (!class_weights.empty() && class_weights.size() != m)
    throw std::invalid_argument("cross_entropy: expected " + std::to_string(m) + " class weights");
  const T lo = static_cast<T>(kProbabilityClamp), hi = static_cast<T>(1.0 - kProbabilityClamp);
  // Per-sample weight is the weight of its true class.
  std::vector<T> sample_w(n, T(1));
  if (!class_weights.empty())
    for (std::size_t r = 0; r < n; ++r) {
      T w = 0;
      for (std::size_t j = 0; j < m; ++j) w += onehot[r * m + j] * static_cast<T>(class_weights[j]);
      sample_w[r] = w;
    }
  T total = 0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) {
      T y = onehot[r * m + j];
      if (y != T(0)) total -= sample_w[r] * y * std::log(std::clamp(probs[r * m + j], lo, hi));
    }
  total /= static_cast<T>(n);
  return make_result<T>({1}, {total}, "cross_entropy", {probs, onehot},
                        [n, m, lo, hi, sample_w = std::move(sample_w)](detail::Node<T>& node) {
                          auto& p = *node.inputs[0];
                          auto& y = *node.inputs[1];
                          if (!p.requires_grad) return;
                          auto& g = p.ensure_grad();
                          const T scale = node.grad[0] / static_cast<T>(n);
                          for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t j = 0; j < m; ++j) {
                              const std::size_t k = r * m + j;
                              const T pk = p.data[k];
                              if (y.data[k] == T(0) || pk < lo || pk > hi) continue;
                              g[k] -= scale * sample_w[r] * y.data[k] / pk;
                            }
                        });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  return mean(square(add(pred, mul(target, Tensor<T>::full(target.shape(), T(-1))))));
}

template <typename T>
Tensor<T> one_hot(std::span<const int> labels, int num_classes) {
  Tensor<T> out({labels.size(), static_cast<std::size_t>(num_classes)});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= num_classes)
      throw std::out_of_range("one_hot: label " + std::to_string(labels[r]) + " outside [0," +
                              std::to_string(num_classes) + ")");
    out[r * num_classes + labels[r]] = T(1);
  }
  return out;
}

#define MSED_INSTANTIATE_NN(T)                                                                              \
  template class ProbeScope<T>;                                                                             \
  template void emit_probe<T>(const std::string&, const Tensor<T>&);                                        \
  template class Conv2dLayer<T>;                                                                            \
  template class BatchNormLayer<T>;                                                                         \
  template class DenseLayer<T>;                                                                             \
  template class SeBlock<T>;                                                                                \
  template class SeDenseModule<T>;                                                                          \
  template class DenseBlock<T>;                                                                             \
  template class TransitionBlock<T>;                                                                        \
  template class SeDenseNet<T>;                                                                             \
  template class FusionMlp<T>;                                                                              \
  template SeDenseNet<T> build_sedensenet<T>(const NetworkSpec&, std::mt19937_64&);                         \
  template FusionMlp<T> build_fusion_mlp<T>(std::size_t, std::size_t, int, std::mt19937_64&);               \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                          \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const Tensor<T>&, std::span<const double>);         \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> one_hot<T>(std::span<const int>, int);

MSED_INSTANTIATE_NN(float)
MSED_INSTANTIATE_NN(double)

#undef MSED_INSTANTIATE_NN

}  // namespace msed

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

#include "msed/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace msed {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (std::size_t d : shape)
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  node_->data.assign(shape_numel(shape), T(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<detail::Node<T>>()) {
  check_shape(shape);
  if (values.size() != shape_numel(shape))
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                                shape_str(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
  node_->id = detail::next_node_id();
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(node_->shape, node_->data, false);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw std::invalid_argument("cannot reshape " + shape_str(node_->shape) + " to " + shape_str(shape));
  // A reshape is an op of its own so gradients flow through it.
  std::vector<T> values = node_->data;
  return make_result<T>(std::move(shape), std::move(values), "reshape", {*this}, [](detail::Node<T>& out) {
    auto& in = *out.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
void Tensor<T>::backward() {
  if (numel() != 1) throw std::invalid_argument("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Collect the reachable subgraph; creation ids give a topological order.
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<detail::Node<T>*> stack{node_.get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& in : n->inputs)
      if (in->requires_grad) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id > b->id; });

  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  node_->ensure_grad()[0] += T(1);

  for (auto* n : order)
    if (!n->is_leaf() && !n->grad.empty()) n->backward_fn(*n);
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(values), false);
  bool track = false;
  for (const auto& in : inputs) track = track || needs_grad(in);
  auto node = out.node();
  node->op = op;
  if (track) {
    node->requires_grad = true;
    for (const auto& in : inputs)
      if (in.defined()) node->inputs.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result<float>(Shape, std::vector<float>, const char*, std::initializer_list<Tensor<float>>,
                                          std::function<void(detail::Node<float>&)>);
template Tensor<double> make_result<double>(Shape, std::vector<double>, const char*,
                                            std::initializer_list<Tensor<double>>,
                                            std::function<void(detail::Node<double>&)>);

}  // namespace msed

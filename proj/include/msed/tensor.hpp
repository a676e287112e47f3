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

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace msed {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the autograd tape. Nodes are created in topological order, so
// the creation id doubles as the tape position.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first gradient lands
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

std::uint64_t next_node_id();

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Dense row-major n-dimensional array with optional gradient.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for
/// an independent copy. Operations in ops.hpp record themselves on the tape
/// when any input requires a gradient and grad mode is enabled.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) { return Tensor(std::move(shape), requires_grad); }
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false) { return full({1}, value, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* raw() { return node_->data.data(); }
  const T* raw() const { return node_->data.data(); }
  T item() const;
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad();

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  /// Independent leaf copy of the values; no gradient history.
  Tensor clone() const;
  /// Leaf that shares no history with this tensor but copies its values.
  Tensor detach() const { return clone(); }
  /// Same storage viewed with a different shape of equal size.
  Tensor reshape(Shape shape) const;

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  /// calls until zero_grad(); intermediate gradients are recomputed.
  void backward();

  const char* op_name() const { return node_->op; }
  std::shared_ptr<detail::Node<T>> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node);

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Creates an output tensor wired to `inputs` on the tape when recording is
/// active and any input needs a gradient. `backward` receives the output node.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(detail::Node<T>&)> backward);

template <typename T>
bool needs_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad() && grad_enabled();
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace msed

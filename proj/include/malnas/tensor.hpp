// Copyright 2026 The malnas Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace malnas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// One node of the recorded computation. Leaves (parameters, inputs) have no
// inputs and no backward rule.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(TensorNode&)> backward;
  const char* op = "leaf";

  // Grad buffer, zero-filled on first use.
  std::span<double> grad_buffer();
};

// Dense row-major float64 tensor with reverse-mode autodiff. Copies share the
// underlying node, so a Tensor behaves like a handle.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();
  void clear_grad() { node_->grad.clear(); }

  // Seeds d(self)/d(self) = 1 for a single-element tensor and runs the tape.
  void backward() const;
  // Seeds with an explicit upstream gradient (same length as data).
  void backward(std::span<const double> seed) const;

  // A leaf copy of the values, cut from the graph.
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Topologically ordered list of the operations reachable from a root.
// Every operation's inputs precede it; backward() walks the list in reverse
// and visits each operation once.
class Tape {
 public:
  explicit Tape(const Tensor& root);

  std::span<TensorNode* const> operations() const { return order_; }
  void backward(std::span<const double> seed) const;

 private:
  std::shared_ptr<TensorNode> root_;
  std::vector<TensorNode*> order_;
};

enum class Mode { train, eval };

}  // namespace malnas

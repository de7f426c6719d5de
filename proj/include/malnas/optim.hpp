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
#include <span>
#include <string>
#include <vector>

#include "malnas/rng.hpp"
#include "malnas/tensor.hpp"

namespace malnas {

// A trainable (or buffer) tensor with a stable name used by checkpoints and
// by weight transfer between the supernet and derived networks.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

std::vector<Tensor> tensors_of(const ParameterList& params);
std::size_t parameter_count(const ParameterList& params);

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng);

void zero_grads(std::span<Tensor> params);
// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

struct SgdOptions {
  double lr = 0.025;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

class Sgd {
 public:
  explicit Sgd(SgdOptions options) : options_(options) {}

  // Every parameter must carry a gradient buffer (UsageError otherwise).
  void step(std::span<Tensor> params);
  void set_lr(double lr) { options_.lr = lr; }
  const SgdOptions& options() const { return options_; }

 private:
  SgdOptions options_;
  std::vector<std::vector<double>> velocity_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // L2 added to the gradient
};

class Adam {
 public:
  explicit Adam(AdamOptions options) : options_(options) {}

  void step(std::span<Tensor> params);
  void set_lr(double lr) { options_.lr = lr; }
  const AdamOptions& options() const { return options_; }
  std::size_t steps() const { return t_; }

 private:
  AdamOptions options_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

// lr(e) = lr_min + (lr_max - lr_min) * (1 + cos(pi * e / total)) / 2
class CosineSchedule {
 public:
  CosineSchedule(double lr_max, double lr_min, std::size_t total_epochs)
      : lr_max_(lr_max), lr_min_(lr_min), total_(total_epochs) {}

  double at(std::size_t epoch) const;

 private:
  double lr_max_;
  double lr_min_;
  std::size_t total_;
};

}  // namespace malnas

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

#include "malnas/optim.hpp"

#include <cmath>
#include <numbers>
#include <algorithm>
#include <string>

#include "malnas/error.hpp"

namespace malnas {

std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.tensor.requires_grad()) n += p.tensor.numel();
  }
  return n;
}

Tensor init_uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(data), true);
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

namespace {

void require_grads(std::span<Tensor> params, const char* who) {
  for (const auto& p : params) {
    if (!p.has_grad()) throw UsageError(std::string(who) + ": parameter without a gradient");
  }
}

}  // namespace

void Sgd::step(std::span<Tensor> params) {
  require_grads(params, "sgd");
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].numel(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = g[j] + options_.weight_decay * w[j];
      vel[j] = options_.momentum * vel[j] + grad;
      w[j] -= options_.lr * vel[j];
    }
  }
}

void Adam::step(std::span<Tensor> params) {
  require_grads(params, "adam");
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].numel(), 0.0);
      v_[i].assign(params[i].numel(), 0.0);
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = g[j] + options_.weight_decay * w[j];
      m[j] = b1 * m[j] + (1.0 - b1) * grad;
      v[j] = b2 * v[j] + (1.0 - b2) * grad * grad;
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

double CosineSchedule::at(std::size_t epoch) const {
  if (total_ == 0) return lr_max_;
  const double frac = static_cast<double>(std::min(epoch, total_)) / static_cast<double>(total_);
  return lr_min_ + (lr_max_ - lr_min_) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace malnas

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

// Central finite-difference oracle for reverse-mode gradients. Test-only.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "malnas/ops.hpp"
#include "malnas/rng.hpp"
#include "malnas/tensor.hpp"

namespace malnas::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

inline double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
  return std::abs(analytic - numeric) / scale;
}

// Reduces fn's output to a scalar through a fixed random projection, then
// compares the tape's gradient against (f(x+h) - f(x-h)) / 2h for every
// coordinate, or for max_coords sampled coordinates per input when nonzero.
inline GradCheckResult gradcheck(const TensorFn& fn, std::vector<Tensor> inputs, Rng& rng,
                                 std::size_t max_coords = 0, double step = 1e-5) {
  const Tensor probe = fn(inputs);
  std::vector<double> projection(probe.numel());
  for (auto& v : projection) v = rng.uniform(-1.0, 1.0);
  const Tensor proj = Tensor::from(probe.shape(), projection);

  auto objective = [&](const std::vector<Tensor>& xs) { return sum(mul(fn(xs), proj)); };

  for (auto& x : inputs) x.zero_grad();
  objective(inputs).backward();

  GradCheckResult result;
  for (auto& x : inputs) {
    std::vector<std::size_t> coords(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords != 0 && coords.size() > max_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(max_coords);
    }
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (auto c : coords) {
      auto data = x.mutable_data();
      const double saved = data[c];
      data[c] = saved + step;
      const double up = objective(inputs).item();
      data[c] = saved - step;
      const double down = objective(inputs).item();
      data[c] = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[c], numeric));
      ++result.coordinates;
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(data), true);
}

// Values pairwise at least 'gap' apart, so max-selection is stable under
// the finite-difference step.
inline Tensor distinct_tensor(Shape shape, Rng& rng, double gap = 1e-2) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = (static_cast<double>(i) - static_cast<double>(n) / 2.0) * gap;
  rng.shuffle(data.begin(), data.end());
  return Tensor::from(std::move(shape), std::move(data), true);
}

// Values with |x| >= margin, away from the ReLU/ELU kink.
inline Tensor away_from_zero(Shape shape, Rng& rng, double margin = 1e-3) {
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) {
    do {
      v = rng.uniform(-2.0, 2.0);
    } while (std::abs(v) < margin);
  }
  return Tensor::from(std::move(shape), std::move(data), true);
}

}  // namespace malnas::testing

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
#include <cstdint>
#include <utility>
#include <vector>

#include "malnas/nas.hpp"
#include "malnas/search_space.hpp"

namespace malnas {

struct TpeParams {
  double gamma = 0.25;
  std::size_t n_startup = 10;
  std::size_t n_candidates = 24;

  // SpecError unless 0 < gamma < 1 and both counts are positive.
  void check() const;
};

struct Observation {
  Assignment config;
  double objective = 0.0;  // maximized
};

struct ObservationSplit {
  std::vector<std::size_t> good;  // indices into the observations
  std::vector<std::size_t> bad;
};

// The ceil(gamma * n) best by objective are good; ties keep insertion order.
// UsageError below two observations.
ObservationSplit split_observations(const std::vector<Observation>& obs, double gamma);

// One-dimensional Parzen estimator over a single parameter.
//
// Kernel space depends on the spec: grid index for uniform grids, the value
// itself for quniform and continuous uniform, the log of the value for
// loguniform. The mixture is a uniform prior over the kernel-space range
// plus one truncated Gaussian per observation, all weighted 1/(n+1).
// Discrete specs integrate the mixture over each grid cell. Categorical and
// boolean specs use add-one smoothed counts.
class ParzenDensity {
 public:
  ParzenDensity(const ParamSpec& spec, const std::vector<ParamValue>& values);

  // log of the probability mass (discrete) or kernel-space density
  // (continuous) at value.
  double log_density(const ParamValue& value) const;
  ParamValue sample(Rng& rng) const;

  // Mass of every grid value, in grid order; discrete specs only.
  const std::vector<double>& masses() const { return masses_; }
  const std::vector<ParamValue>& grid() const { return grid_; }

 private:
  enum class Space { counts, index, value, log_value };

  double to_kernel(double v) const;
  double mixture_cdf(double x) const;
  double mixture_pdf(double x) const;
  std::size_t grid_index(const ParamValue& value) const;

  ParamSpec spec_;
  Space space_ = Space::value;
  double lo_ = 0.0;
  double hi_ = 1.0;
  std::vector<double> mus_;
  std::vector<double> sigmas_;
  std::vector<ParamValue> grid_;
  std::vector<double> cell_edges_;  // kernel space, grid_.size() + 1 entries
  std::vector<double> masses_;
};

// Good/bad density pair fitted to a set of observations.
class TpeModel {
 public:
  TpeModel(const SearchSpace& space, const std::vector<Observation>& obs, double gamma);

  // Sum over parameters of log l(x) - log g(x).
  double log_ratio(const Assignment& config) const;
  double log_ratio(const std::string& param, const ParamValue& value) const;
  Assignment sample_good(Rng& rng) const;

 private:
  SearchSpace space_;
  std::vector<std::pair<ParzenDensity, ParzenDensity>> densities_;  // (good, bad) per spec
};

// Random sample while fewer than n_startup observations exist; otherwise the
// best of n_candidates draws from the good density by log ratio (first
// candidate on ties).
Assignment suggest(const std::vector<Observation>& obs, const SearchSpace& space, const TpeParams& params,
                   Rng& rng);

struct TuneOptions {
  std::size_t n_trials = 150;
  std::size_t epochs_per_trial = 10;
  std::uint64_t seed = 0;
  TpeParams tpe;
  SelectionMetric selection = SelectionMetric::f1;
};

// Sequential TPE loop. Each trial trains under the suggested configuration
// and its fitness (best F1, or exp(-best loss) under loss selection) becomes
// an observation. Failed trials are recorded but not observed.
SearchResult run_tuning(const SearchSpace& space, const TrialEvaluator& evaluate, const TuneOptions& options,
                        const RunOptions& run = {});

// Evaluator that trains a fixed architecture under a hyper assignment.
TrialEvaluator ffnn_hyper_evaluator(const ArchitectureConfig& arch, const TabularDataset& train,
                                    const TabularDataset& valid, const TrainOptions& options);

}  // namespace malnas

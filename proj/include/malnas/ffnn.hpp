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
#include <optional>
#include <vector>

#include <json.hpp>

#include "malnas/checkpoint.hpp"
#include "malnas/data.hpp"
#include "malnas/ops.hpp"
#include "malnas/optim.hpp"
#include "malnas/search_space.hpp"

namespace malnas {

enum class CountLoss {
  mse_log1p,  // MSE between log1p(count) / log1p(train max) and the head output
  poisson,    // Poisson negative log-likelihood with the head output as log-rate
};

std::string_view to_string(CountLoss kind);
CountLoss parse_count_loss(std::string_view name);

struct DenseLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const;
};

struct FfnnOutput {
  Tensor malicious;  // [n, 1], in (0, 1)
  Tensor tags;       // [n, n_tags] or undefined
  Tensor count;      // [n, 1] raw head output or undefined
};

class FfnnModel {
 public:
  FfnnModel(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags, Rng& rng);

  const ArchitectureConfig& arch() const { return arch_; }
  std::size_t input_dim() const { return input_dim_; }
  std::size_t n_tags() const { return n_tags_; }
  bool has_tag_head() const { return arch_.use_tags; }
  bool has_count_head() const { return arch_.use_counts; }

  FfnnOutput forward(const Tensor& x, Mode mode, double dropout, Rng& rng) const;
  ParameterList parameters() const;

 private:
  ArchitectureConfig arch_;
  std::size_t input_dim_;
  std::size_t n_tags_;
  std::vector<DenseLayer> trunk_;  // input projection first
  DenseLayer malicious_head_;
  std::vector<DenseLayer> tag_hidden_;
  DenseLayer tag_out_;
  DenseLayer count_head_;
};

// SpecError for an invalid architecture, n_tags == 0 with tags, or input_dim == 0.
FfnnModel build_ffnn(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags, Rng& rng);

// Closed-form trainable-parameter count of build_ffnn's network.
std::size_t ffnn_parameter_count(const ArchitectureConfig& arch, std::size_t input_dim, std::size_t n_tags);

struct LossWeights {
  double malicious = 1.0;
  double tag = 0.0;
  double count = 0.0;
};

struct HeadTargets {
  Tensor malicious;  // [n, 1]
  Tensor tags;       // [n, n_tags] or undefined
  Tensor count;      // [n, 1] already transformed for the chosen CountLoss
};

// 1.0 * BCE(malicious) + w_t * BCE(tags) + w_c * count loss. A positive
// weight on a head the prediction lacks is a UsageError.
Tensor multi_head_loss(const FfnnOutput& pred, const HeadTargets& targets, const LossWeights& weights,
                       CountLoss count_loss = CountLoss::mse_log1p);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_f1 = 0.0;
  double val_accuracy = 0.0;
};

struct TrainOptions {
  std::size_t epochs = 10;
  CountLoss count_loss = CountLoss::mse_log1p;
  // Evaluation batch size (no effect on results).
  std::size_t eval_batch = 4096;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Adam mini-batch training with a fresh shuffle each epoch; validation
// metrics after every epoch. A batch size above the training-set size is
// reduced to it. Non-finite losses raise NumericError.
std::vector<EpochMetrics> train_epochs(FfnnModel& model, const TabularDataset& train, const TabularDataset& valid,
                                       const HyperConfig& hyper, const TrainOptions& options, Rng& rng,
                                       const EpochCallback& on_epoch = {});

// Malicious-head probabilities in eval mode.
std::vector<double> predict_malicious(const FfnnModel& model, const TabularDataset& data, std::size_t batch = 4096);

LossWeights loss_weights_for(const ArchitectureConfig& arch, const HyperConfig& hyper);

nlohmann::json architecture_to_json(const ArchitectureConfig& arch);
ArchitectureConfig architecture_from_json(const nlohmann::json& j);
nlohmann::json hyper_to_json(const HyperConfig& hyper);
HyperConfig hyper_from_json(const nlohmann::json& j);

// Checkpoint config: {"model": "ffnn", "architecture", "hyper", "input_dim",
// "n_tags"} merged with `extra`.
Checkpoint ffnn_checkpoint(const FfnnModel& model, const HyperConfig& hyper,
                           const nlohmann::json& extra = nlohmann::json::object());
FfnnModel ffnn_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace malnas

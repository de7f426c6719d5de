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

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "malnas/checkpoint.hpp"
#include "malnas/data.hpp"
#include "malnas/ffnn.hpp"
#include "malnas/ops.hpp"
#include "malnas/optim.hpp"

namespace malnas {

// ---------------------------------------------------------------------------
// Operation menu and cell topology
// ---------------------------------------------------------------------------

enum class OpKind : std::uint8_t {
  skip,  // identity; factorized reduce on stride-2 edges
  dil_conv_3x3,
  dil_conv_5x5,
  sep_conv_3x3,
  sep_conv_5x5,
  avg_pool_3x3,
  max_pool_3x3,
  zero,
};

inline constexpr std::size_t kOpCount = 8;

// Menu order; also the tie-break order of genotype derivation.
const std::array<OpKind, kOpCount>& op_menu();
std::string_view to_string(OpKind op);
OpKind parse_op_kind(std::string_view name);
bool is_conv(OpKind op);

// Node j (0-based) reads from inputs 0 and 1 (the cell inputs) and from
// nodes 0..j-1 (input index 2 + node). Edges are numbered node by node.
std::size_t edge_count(std::size_t nodes);
std::size_t edge_index(std::size_t node, std::size_t input);

// Indices of the reduction cells: floor(L/3) and floor(2L/3), or the single
// floor(L/2) when L < 3.
std::vector<std::size_t> reduction_layers(std::size_t layers);

struct GenotypeEdge {
  OpKind op = OpKind::skip;
  std::size_t input = 0;

  bool operator==(const GenotypeEdge&) const = default;
};

struct CellGenotype {
  std::vector<std::array<GenotypeEdge, 2>> nodes;

  bool operator==(const CellGenotype&) const = default;
};

struct Genotype {
  CellGenotype normal;
  CellGenotype reduction;

  bool operator==(const Genotype&) const = default;
};

// SpecError unless every node has two distinct in-range inputs and no zero op.
void validate_genotype(const Genotype& genotype);

// Line-oriented text form:
//   cell normal
//   node 0 sep_conv_3x3 1 skip 0
//   ...
//   cell reduction
//   ...
std::string genotype_to_text(const Genotype& genotype);
Genotype genotype_from_text(std::string_view text);

// ---------------------------------------------------------------------------
// Architecture weights
// ---------------------------------------------------------------------------

struct AlphaParams {
  std::size_t nodes = 0;
  Tensor normal;     // [edge_count(nodes), kOpCount]
  Tensor reduction;  // [edge_count(nodes), kOpCount]
};

// Small random logits (1e-3 * N(0,1)).
AlphaParams init_alphas(std::size_t nodes, Rng& rng);
// Row-wise softmax of one alpha matrix, as plain values.
std::vector<double> alpha_weights(const Tensor& alpha);

// Per node, the two incoming edges whose strongest non-zero op has the
// largest softmax weight (ties to the lower input); each edge keeps that op
// (ties to menu order). Edges are listed by ascending input.
CellGenotype derive_cell(const Tensor& alpha, std::size_t nodes);
Genotype derive_genotype(const AlphaParams& alphas);

nlohmann::json to_json(const AlphaParams& alphas);
AlphaParams alphas_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

struct CellNetConfig {
  std::size_t layers = 5;
  std::size_t nodes = 5;
  std::size_t channels = 5;
  std::size_t input_channels = 1;
  std::size_t input_size = 64;
  std::size_t stem_multiplier = 3;
  // Stride of the stem convolution; 1 keeps full resolution.
  std::size_t stem_stride = 1;
  // Construction fails above this many trainable parameters.
  std::size_t max_parameters = 5'000'000;

  // SpecError for invalid sizes or a resolution that reductions cannot halve.
  void check() const;
};

nlohmann::json to_json(const CellNetConfig& config);
CellNetConfig cell_net_config_from_json(const nlohmann::json& j);

// Stem, L cells and a sigmoid head. A supernet carries every op on every
// edge and needs alphas at forward time; a discrete network realizes one
// genotype. Parameter names depend only on (cell, edge, op), so weights can
// move between the two.
class CellNetwork {
 public:
  static CellNetwork supernet(const CellNetConfig& config, Rng& rng);
  static CellNetwork discrete(const Genotype& genotype, const CellNetConfig& config, Rng& rng);

  CellNetwork(CellNetwork&&) noexcept;
  CellNetwork& operator=(CellNetwork&&) noexcept;
  ~CellNetwork();

  bool is_supernet() const;
  const CellNetConfig& config() const;
  const std::optional<Genotype>& genotype() const;

  // x: [b, input_channels, input_size, input_size] -> [b, 1] probabilities.
  Tensor forward(const Tensor& x, Mode mode, double dropout, Rng& rng, const AlphaParams* alphas = nullptr) const;

  ParameterList parameters() const;
  // Parameters plus batch-norm running statistics.
  std::vector<CheckpointArray> state() const;
  // Every entry of state() must be present (SchemaError otherwise).
  void load_state(const std::vector<CheckpointArray>& arrays);
  // Copies only the entries whose names exist here; returns how many.
  std::size_t load_matching(const std::vector<CheckpointArray>& arrays);

  // Defined in the implementation file only.
  struct Impl;

 private:
  explicit CellNetwork(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Applies one op on its own, for shape checks; the op is freshly built
// with `channels` in and out (2x channels out for stride 2 skip).
Tensor apply_op(OpKind op, const Tensor& x, std::size_t stride, Rng& rng);

// sum_o softmax(edge_alpha)_o * op_o(x) over freshly built ops, created in
// menu order from rng (so apply_op with the same stream sees equal weights).
Tensor mixed_op(const Tensor& x, const Tensor& edge_alpha, std::size_t stride, Rng& rng);

// ---------------------------------------------------------------------------
// Image data
// ---------------------------------------------------------------------------

struct ImageSet {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // NCHW
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_numel() const { return channels * height * width; }
  Tensor batch(std::span<const std::size_t> rows) const;
  ImageSet subset(std::span<const std::size_t> rows) const;
};

ImageSet image_set_from(std::span<const ImageSample> samples);

struct PatternImageOptions {
  std::size_t n = 1000;
  std::size_t size = 8;
  double amplitude = 2.5;
  double noise = 1.0;
};

// Gaussian noise plus a zero-mean 3x3 sign pattern, dilated to a 5x5
// footprint, at a random position; the label is the sign of the pattern.
ImageSet synth_pattern_images(const PatternImageOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Search and final training
// ---------------------------------------------------------------------------

struct DartsSearchOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 96;
  double dropout = 0.30;
  double weight_lr_max = 0.025;
  double weight_lr_min = 0.001;
  double weight_momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  double alpha_lr = 3e-4;
  double alpha_weight_decay = 1e-3;
  double alpha_beta1 = 0.5;
  double alpha_beta2 = 0.999;
};

struct DartsEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double valid_accuracy = 0.0;
};

using AlphaStepCallback = std::function<void(const AlphaParams&)>;

// First-order alternating optimization: per batch, one SGD step on the
// network weights over a train batch, then one Adam step on the alphas over
// a valid batch. Alphas are updated in place.
std::vector<DartsEpoch> darts_search(CellNetwork& supernet, AlphaParams& alphas, const ImageSet& train,
                                     const ImageSet& valid, const DartsSearchOptions& options, Rng& rng,
                                     const AlphaStepCallback& on_alpha_step = {});

struct FinalTrainOptions {
  std::size_t epochs = 100;
  double learning_rate = 5e-4;
  std::size_t batch_size = 512;
  double dropout = 0.30;
};

struct FinalTrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
};

// Epoch with the lowest validation loss, ties to the earliest.
std::size_t select_min_loss_epoch(const std::vector<EpochMetrics>& history);

// Adam training; afterwards the network holds the weights of the epoch with
// the lowest validation loss.
FinalTrainResult train_final(CellNetwork& network, const ImageSet& train, const ImageSet& valid,
                             const FinalTrainOptions& options, Rng& rng, const EpochCallback& on_epoch = {});

std::vector<double> predict_images(const CellNetwork& network, const ImageSet& data, std::size_t batch = 256);

Checkpoint cell_network_checkpoint(const CellNetwork& network, const nlohmann::json& extra = nlohmann::json::object());
CellNetwork cell_network_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace malnas

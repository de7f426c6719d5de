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
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malnas/data.hpp"
#include "malnas/ffnn.hpp"
#include "malnas/search_space.hpp"

namespace malnas {

enum class TrialStatus { completed, failed };

std::string_view to_string(TrialStatus status);

struct TrialRecord {
  std::size_t trial_id = 0;
  Assignment config;
  std::vector<EpochMetrics> per_epoch;
  double best_f1 = 0.0;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  double best_loss = 0.0;      // min validation loss; +inf when no epoch ran
  TrialStatus status = TrialStatus::completed;
  std::string error;
  double wall_time = 0.0;  // seconds; kept out of the ledger bytes
};

// Fills best_f1 / best_epoch / best_loss from per_epoch.
void summarize(TrialRecord& record);

struct TrialLedger {
  std::string phase;  // "nas" or "tune"
  std::uint64_t seed = 0;
  std::string space_fingerprint;
  std::vector<TrialRecord> records;  // ordered by trial_id
};

inline constexpr int kLedgerSchemaVersion = 1;

// Header line followed by one trial per line. Timing is excluded so that
// reruns are byte-identical; it goes to the sidecar instead.
std::string ledger_to_jsonl(const TrialLedger& ledger);
TrialLedger parse_ledger_jsonl(std::string_view text, const SearchSpace* space = nullptr);
std::string timing_to_jsonl(const TrialLedger& ledger);

// Trains one configuration and returns its per-epoch validation metrics.
// The rng is the trial's private stream.
using TrialEvaluator = std::function<std::vector<EpochMetrics>(const Assignment& config, Rng& rng)>;
using TrialCallback = std::function<void(const TrialRecord&)>;

// Per-trial stream derived from (seed, trial_id) only.
std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial_id);

// n distinct configurations by sequential sampling with canonical-key
// rejection. InfeasibleError when n exceeds the grid cardinality.
std::vector<Assignment> sample_distinct(const SearchSpace& space, std::size_t n, std::uint64_t seed);

// Trains one trial on its private stream; malnas::Error fails the trial.
TrialRecord run_trial(std::size_t trial_id, const Assignment& config, const TrialEvaluator& evaluate,
                      std::uint64_t seed);

struct RunOptions {
  std::size_t workers = 1;
  // Trials already present here (same id and canonical key) are reused.
  const TrialLedger* resume = nullptr;
  TrialCallback on_trial;
};

// Evaluates every config in parallel; results land in trial_id order.
// Errors derived from malnas::Error fail the trial instead of the run.
std::vector<TrialRecord> run_trials(const std::vector<Assignment>& configs, const TrialEvaluator& evaluate,
                                    std::uint64_t seed, const RunOptions& options = {});

enum class SelectionMetric { f1, loss };

std::string_view to_string(SelectionMetric metric);
SelectionMetric parse_selection_metric(std::string_view name);

// Index of the best completed record: max best_f1 (or min best_loss), ties
// to the lower trial_id. nullopt when nothing completed.
std::optional<std::size_t> select_best(const std::vector<TrialRecord>& records,
                                       SelectionMetric metric = SelectionMetric::f1);

struct NasOptions {
  std::size_t n_trials = 150;
  std::size_t epochs_per_trial = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct SearchResult {
  TrialLedger ledger;
  std::optional<std::size_t> best;  // index into ledger.records
};

SearchResult run_nas(const SearchSpace& space, const TrialEvaluator& evaluate, const NasOptions& options,
                     const RunOptions& run = {});

// Evaluator that builds an FFNN from an architecture assignment and trains
// it under a fixed hyper configuration.
TrialEvaluator ffnn_architecture_evaluator(const TabularDataset& train, const TabularDataset& valid,
                                           const HyperConfig& hyper, const TrainOptions& options);

struct TrajectoryPoint {
  std::size_t epoch = 0;
  double mean_best_f1 = 0.0;
  double mean_complexity = 0.0;
};

// For each epoch e, rank completed trials by their best F1 up to e (ties to
// the lower trial_id) and average that statistic and width*depth over the
// top k. k is clamped to the number of completed trials; a trial with
// fewer than e epochs contributes its final best.
std::vector<TrajectoryPoint> top_k_trajectory(const std::vector<TrialRecord>& records, std::size_t k = 30);

nlohmann::json to_json(const std::vector<TrajectoryPoint>& trajectory);

}  // namespace malnas

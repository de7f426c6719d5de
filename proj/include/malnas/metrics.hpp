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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace malnas {

// Positive means malicious. Labels are 0/1.
struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
};

// Predicts positive iff score >= threshold. DataError on empty or misaligned input.
ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold);

struct BasicMetrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Names of metrics whose denominator was zero (reported as 0).
  std::vector<std::string> undefined;
};

BasicMetrics basic_metrics(const ConfusionCounts& counts);
// Harmonic mean; 0 when both inputs are 0.
double f1_from(double precision, double recall);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // +inf at the (0,0) endpoint
};

struct RocCurve {
  std::vector<RocPoint> points;
};

struct RocResult {
  RocCurve curve;
  double auc = 0.0;
};

// Sweeps every distinct score (equal scores form one step) from high to low.
// DataError when only one class is present.
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

struct PartialAuc {
  double raw = 0.0;
  double normalized = 0.0;
};

PartialAuc partial_auc(const RocCurve& curve, double fpr_max = 0.001);

// TPR of the last curve point whose FPR does not exceed the target.
double tpr_at_fpr(const RocCurve& curve, double fpr_target);

struct Calibration {
  double threshold = 0.0;
  double achieved_fpr = 0.0;
  std::size_t negatives = 0;
  std::size_t false_positives = 0;
  // Set when the target is below one negative-sample quantum, so the only
  // admissible threshold sits just above the highest negative score.
  bool at_max_score = false;
};

Calibration calibrate_threshold(std::span<const double> scores, std::span<const int> labels,
                                double target_fpr = 0.01);

struct ScoredInstant {
  double timestamp = 0.0;
  double score = 0.0;
};

struct ScoredTimeline {
  std::string experiment;
  double injection_time = 300.0;
  std::vector<ScoredInstant> instants;
};

struct DelayResult {
  // Mean over detected experiments; nullopt when nothing was detected.
  std::optional<double> mean_seconds;
  std::vector<std::optional<double>> per_experiment;
  std::size_t misses = 0;
};

DelayResult detection_delay(std::span<const ScoredTimeline> timelines, double threshold);

struct EvalReport {
  double decision_threshold = 0.5;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double auc = 0.0;
  double auc_at_fpr_0_001_raw = 0.0;
  double auc_at_fpr_0_001_normalized = 0.0;
  double tpr_at_fpr_0_001 = 0.0;
  double tpr_at_fpr_0_01 = 0.0;
  std::optional<double> calibrated_threshold;
  std::optional<double> tpr_at_calibrated;
  std::optional<double> fpr_at_calibrated;
  std::optional<double> delay_seconds;
  std::size_t delay_misses = 0;
  std::size_t samples = 0;
  std::vector<std::string> flags;
};

// Confusion metrics are taken at the calibrated threshold when one is given,
// else at 0.5. Delay is computed only when timelines are given.
EvalReport evaluate(std::span<const double> scores, std::span<const int> labels,
                    std::optional<double> calibrated_threshold = std::nullopt,
                    std::span<const ScoredTimeline> timelines = {});

nlohmann::json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RocCurve& curve);

// Aligned text tables; the online table has the eight detection columns,
// the static table the AUC/partial-AUC/TPR columns.
std::string online_table(const std::string& model, const EvalReport& report);
std::string static_table(const std::string& model, const EvalReport& report);
// (fpr, tpr, threshold) rows with a header line.
std::string roc_csv(const RocCurve& curve);

}  // namespace malnas

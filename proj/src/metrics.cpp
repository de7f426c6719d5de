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

#include "malnas/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "malnas/error.hpp"
#include "malnas/io.hpp"

namespace malnas {

namespace {

void check_aligned(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw DataError("no scores to evaluate");
  if (scores.size() != labels.size()) {
    throw DataError("scores and labels differ in length (" + std::to_string(scores.size()) + " vs " +
                    std::to_string(labels.size()) + ")");
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("labels must be 0 or 1");
  }
}

double ratio(std::size_t num, std::size_t den, const char* name, std::vector<std::string>& undefined) {
  if (den == 0) {
    undefined.emplace_back(name);
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_aligned(scores, labels);
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      predicted ? ++c.tp : ++c.fn;
    } else {
      predicted ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

double f1_from(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * (precision * recall) / (precision + recall);
}

BasicMetrics basic_metrics(const ConfusionCounts& counts) {
  BasicMetrics m;
  m.accuracy = ratio(counts.tp + counts.tn, counts.total(), "accuracy", m.undefined);
  m.precision = ratio(counts.tp, counts.tp + counts.fp, "precision", m.undefined);
  m.recall = ratio(counts.tp, counts.tp + counts.fn, "recall", m.undefined);
  if (m.precision + m.recall == 0.0) m.undefined.emplace_back("f1");
  m.f1 = f1_from(m.precision, m.recall);
  return m;
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_aligned(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw DataError("AUC is undefined with a single class present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult result;
  auto& pts = result.curve.points;
  pts.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area, in count units
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::size_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      labels[order[i]] == 1 ? ++tp : ++fp;
    }
    area2 += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
    pts.push_back({static_cast<double>(fp) / negatives, static_cast<double>(tp) / positives, s});
  }
  result.auc = area2 / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
  return result;
}

PartialAuc partial_auc(const RocCurve& curve, double fpr_max) {
  if (!(fpr_max > 0.0) || fpr_max > 1.0) throw ParameterError("fpr_max must lie in (0, 1]");
  PartialAuc out;
  const auto& pts = curve.points;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const RocPoint& a = pts[i - 1];
    const RocPoint& b = pts[i];
    if (a.fpr >= fpr_max) break;
    if (b.fpr <= fpr_max) {
      out.raw += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    } else {
      const double t = (fpr_max - a.fpr) / (b.fpr - a.fpr);
      const double tpr_cut = a.tpr + t * (b.tpr - a.tpr);
      out.raw += (fpr_max - a.fpr) * (a.tpr + tpr_cut) / 2.0;
      break;
    }
  }
  out.normalized = out.raw / fpr_max;
  return out;
}

double tpr_at_fpr(const RocCurve& curve, double fpr_target) {
  double tpr = 0.0;
  for (const auto& p : curve.points) {
    if (p.fpr > fpr_target) break;
    tpr = p.tpr;
  }
  return tpr;
}

Calibration calibrate_threshold(std::span<const double> scores, std::span<const int> labels, double target_fpr) {
  check_aligned(scores, labels);
  if (target_fpr < 0.0 || target_fpr >= 1.0) throw ParameterError("target FPR must lie in [0, 1)");
  std::vector<double> neg;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0) neg.push_back(scores[i]);
  }
  if (neg.empty()) throw DataError("threshold calibration needs negative samples");
  std::sort(neg.begin(), neg.end(), std::greater<>());

  Calibration c;
  c.negatives = neg.size();
  // Largest admissible false-positive count; the epsilon absorbs products
  // such as 0.01 * 300 landing just under an integer.
  const auto allowed = static_cast<std::size_t>(std::floor(target_fpr * static_cast<double>(neg.size()) + 1e-9));
  if (allowed >= neg.size()) {
    c.threshold = neg.back();
  } else {
    c.threshold = std::nextafter(neg[allowed], std::numeric_limits<double>::infinity());
    c.at_max_score = allowed == 0;
  }
  c.false_positives = static_cast<std::size_t>(
      std::count_if(neg.begin(), neg.end(), [&](double s) { return s >= c.threshold; }));
  c.achieved_fpr = static_cast<double>(c.false_positives) / static_cast<double>(neg.size());
  return c;
}

DelayResult detection_delay(std::span<const ScoredTimeline> timelines, double threshold) {
  DelayResult r;
  double total = 0.0;
  std::size_t detected = 0;
  for (const auto& tl : timelines) {
    std::optional<double> first;
    for (const auto& inst : tl.instants) {
      if (inst.timestamp < tl.injection_time || inst.score < threshold) continue;
      if (!first || inst.timestamp < *first) first = inst.timestamp;
    }
    if (first) {
      const double d = *first - tl.injection_time;
      r.per_experiment.emplace_back(d);
      total += d;
      ++detected;
    } else {
      r.per_experiment.emplace_back(std::nullopt);
      ++r.misses;
    }
  }
  if (detected > 0) r.mean_seconds = total / static_cast<double>(detected);
  return r;
}

EvalReport evaluate(std::span<const double> scores, std::span<const int> labels,
                    std::optional<double> calibrated_threshold, std::span<const ScoredTimeline> timelines) {
  EvalReport rep;
  rep.samples = scores.size();
  rep.decision_threshold = calibrated_threshold.value_or(0.5);
  const auto counts = confusion(scores, labels, rep.decision_threshold);
  const auto basic = basic_metrics(counts);
  rep.accuracy = basic.accuracy;
  rep.precision = basic.precision;
  rep.recall = basic.recall;
  rep.f1 = basic.f1;
  for (const auto& name : basic.undefined) rep.flags.push_back("undefined:" + name);

  const auto roc = roc_auc(scores, labels);
  rep.auc = roc.auc;
  const auto pauc = partial_auc(roc.curve, 0.001);
  rep.auc_at_fpr_0_001_raw = pauc.raw;
  rep.auc_at_fpr_0_001_normalized = pauc.normalized;
  rep.tpr_at_fpr_0_001 = tpr_at_fpr(roc.curve, 0.001);
  rep.tpr_at_fpr_0_01 = tpr_at_fpr(roc.curve, 0.01);

  if (calibrated_threshold) {
    rep.calibrated_threshold = calibrated_threshold;
    const double pos = static_cast<double>(counts.tp + counts.fn);
    const double neg = static_cast<double>(counts.fp + counts.tn);
    rep.tpr_at_calibrated = pos > 0 ? counts.tp / pos : 0.0;
    rep.fpr_at_calibrated = neg > 0 ? counts.fp / neg : 0.0;
    if (!timelines.empty()) {
      const auto delay = detection_delay(timelines, *calibrated_threshold);
      rep.delay_seconds = delay.mean_seconds;
      rep.delay_misses = delay.misses;
      if (!delay.mean_seconds) rep.flags.push_back("undefined:delay");
    }
  }
  return rep;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

std::string cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.5f", v);
  return buf;
}

std::string cell(const std::optional<double>& v, const char* suffix = "") {
  return v ? cell(*v) + suffix : std::string("-");
}

std::string render(const std::vector<std::string>& header, const std::vector<std::string>& row) {
  std::string out;
  std::vector<std::size_t> widths(header.size());
  for (std::size_t i = 0; i < header.size(); ++i) widths[i] = std::max(header[i].size(), row[i].size());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      out += i == 0 ? "| " : " | ";
      out += cells[i];
      out.append(widths[i] - cells[i].size(), ' ');
    }
    out += " |\n";
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : widths) rule.emplace_back(w, '-');
  line(rule);
  line(row);
  return out;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  return {
      {"samples", r.samples},
      {"decision_threshold", r.decision_threshold},
      {"accuracy", r.accuracy},
      {"precision", r.precision},
      {"recall", r.recall},
      {"f1", r.f1},
      {"auc", r.auc},
      {"auc_at_fpr_0_001_raw", r.auc_at_fpr_0_001_raw},
      {"auc_at_fpr_0_001_normalized", r.auc_at_fpr_0_001_normalized},
      {"tpr_at_fpr_0_001", r.tpr_at_fpr_0_001},
      {"tpr_at_fpr_0_01", r.tpr_at_fpr_0_01},
      {"calibrated_threshold", opt(r.calibrated_threshold)},
      {"tpr_at_calibrated", opt(r.tpr_at_calibrated)},
      {"fpr_at_calibrated", opt(r.fpr_at_calibrated)},
      {"delay_seconds", opt(r.delay_seconds)},
      {"delay_misses", r.delay_misses},
      {"flags", r.flags},
  };
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  try {
    EvalReport r;
    r.samples = j.at("samples").get<std::size_t>();
    r.decision_threshold = j.at("decision_threshold").get<double>();
    r.accuracy = j.at("accuracy").get<double>();
    r.precision = j.at("precision").get<double>();
    r.recall = j.at("recall").get<double>();
    r.f1 = j.at("f1").get<double>();
    r.auc = j.at("auc").get<double>();
    r.auc_at_fpr_0_001_raw = j.at("auc_at_fpr_0_001_raw").get<double>();
    r.auc_at_fpr_0_001_normalized = j.at("auc_at_fpr_0_001_normalized").get<double>();
    r.tpr_at_fpr_0_001 = j.at("tpr_at_fpr_0_001").get<double>();
    r.tpr_at_fpr_0_01 = j.at("tpr_at_fpr_0_01").get<double>();
    r.calibrated_threshold = opt_from(j, "calibrated_threshold");
    r.tpr_at_calibrated = opt_from(j, "tpr_at_calibrated");
    r.fpr_at_calibrated = opt_from(j, "fpr_at_calibrated");
    r.delay_seconds = opt_from(j, "delay_seconds");
    r.delay_misses = j.value("delay_misses", std::size_t{0});
    r.flags = j.value("flags", std::vector<std::string>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed evaluation report: ") + e.what());
  }
}

nlohmann::json to_json(const RocCurve& curve) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : curve.points) {
    arr.push_back({{"fpr", p.fpr}, {"tpr", p.tpr},
                   {"threshold", std::isfinite(p.threshold) ? nlohmann::json(p.threshold) : nlohmann::json(nullptr)}});
  }
  return arr;
}

std::string online_table(const std::string& model, const EvalReport& r) {
  return render({"Model", "Accuracy", "Precision", "Recall", "F1-Score", "AUC", "Delay @ Low FPR", "TPR @ Low FPR",
                 "FPR @ Low FPR"},
                {model, cell(r.accuracy), cell(r.precision), cell(r.recall), cell(r.f1), cell(r.auc),
                 cell(r.delay_seconds, " s"), cell(r.tpr_at_calibrated), cell(r.fpr_at_calibrated)});
}

std::string static_table(const std::string& model, const EvalReport& r) {
  return render({"Model", "AUC", "AUC <= 0.1% FPR (raw)", "AUC <= 0.1% FPR (norm)", "Accuracy", "F1-Score",
                 "TPR: 0.1% FPR", "TPR: 1% FPR"},
                {model, cell(r.auc), cell(r.auc_at_fpr_0_001_raw), cell(r.auc_at_fpr_0_001_normalized),
                 cell(r.accuracy), cell(r.f1), cell(r.tpr_at_fpr_0_001), cell(r.tpr_at_fpr_0_01)});
}

std::string roc_csv(const RocCurve& curve) {
  std::string out = "fpr,tpr,threshold\n";
  for (const auto& p : curve.points) {
    out += format_double(p.fpr) + "," + format_double(p.tpr) + "," +
           (std::isfinite(p.threshold) ? format_double(p.threshold) : std::string("inf")) + "\n";
  }
  return out;
}

}  // namespace malnas

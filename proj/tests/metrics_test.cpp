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

#include <cmath>

#include <gtest/gtest.h>

#include "malnas/error.hpp"
#include "malnas/metrics.hpp"
#include "malnas/rng.hpp"

namespace malnas {
namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

RocCurve hand_curve() {
  RocCurve c;
  c.points = {{0.0, 0.0, 1.0}, {0.0005, 0.5, 0.8}, {0.002, 0.9, 0.5}, {1.0, 1.0, 0.1}};
  return c;
}

TEST(Confusion, HandCounts) {
  std::vector<double> s{0.9, 0.8, 0.4, 0.6, 0.2, 0.7};
  std::vector<int> y{1, 1, 1, 0, 0, 0};
  auto c = confusion(s, y, 0.5);
  EXPECT_EQ(c.tp, 2u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_EQ(c.fp, 2u);
  EXPECT_EQ(c.tn, 1u);
  EXPECT_EQ(c.total(), 6u);

  auto none = confusion(s, y, 0.95);
  EXPECT_EQ(none.tp + none.fp, 0u);
  auto perfect = confusion(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}, 0.5);
  EXPECT_EQ(perfect.fp + perfect.fn, 0u);
  EXPECT_THROW(confusion({}, {}, 0.5), DataError);
}

TEST(BasicMetrics, PublishedPrecisionRecallGiveF1) {
  EXPECT_NEAR(f1_from(0.98674, 0.99166), 0.98919, 5e-5);
  auto all = basic_metrics({1, 0, 1, 0});
  EXPECT_EQ(all.accuracy, 1.0);
  EXPECT_EQ(all.precision, 1.0);
  EXPECT_EQ(all.recall, 1.0);
  EXPECT_EQ(all.f1, 1.0);
  EXPECT_EQ(f1_from(1.0, 0.0), 0.0);
}

TEST(BasicMetrics, ZeroDenominatorsAreFlagged) {
  auto m = basic_metrics({0, 0, 5, 3});
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_NE(std::find(m.undefined.begin(), m.undefined.end(), "precision"), m.undefined.end());
}

TEST(Roc, SeparatedAndReversed) {
  std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y).auc, 1.0);
  EXPECT_EQ(roc_auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, y).auc, 0.0);
  EXPECT_THROW(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), DataError);
}

TEST(Roc, MatchesPairwiseStatisticWithTies) {
  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> s(1000);
    std::vector<int> y(1000);
    for (std::size_t i = 0; i < s.size(); ++i) {
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
      // Coarse rounding forces many ties.
      s[i] = std::round((rng.uniform() + 0.3 * y[i]) * 50.0) / 50.0;
    }
    auto r = roc_auc(s, y);
    EXPECT_NEAR(r.auc, pairwise_auc(s, y), 1e-9);
    for (std::size_t i = 1; i < r.curve.points.size(); ++i) {
      EXPECT_GE(r.curve.points[i].fpr, r.curve.points[i - 1].fpr);
      EXPECT_GE(r.curve.points[i].tpr, r.curve.points[i - 1].tpr);
    }
    EXPECT_EQ(r.curve.points.back().fpr, 1.0);
    EXPECT_EQ(r.curve.points.back().tpr, 1.0);
  }
}

TEST(PartialAuc, HandTrapezoid) {
  auto p = partial_auc(hand_curve(), 0.001);
  const double expected = 0.0005 * 0.5 / 2.0 + 0.0005 * (0.5 + (0.5 + 0.4 / 3.0)) / 2.0;
  EXPECT_NEAR(p.raw, expected, 1e-15);
  EXPECT_NEAR(p.normalized, expected / 0.001, 1e-12);
}

TEST(PartialAuc, PerfectAndBlind) {
  auto perfect = roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1});
  auto p = partial_auc(perfect.curve);
  EXPECT_NEAR(p.raw, 0.001, 1e-15);
  EXPECT_NEAR(p.normalized, 1.0, 1e-12);

  RocCurve blind;
  blind.points = {{0.0, 0.0, 1.0}, {0.01, 0.0, 0.5}, {1.0, 1.0, 0.0}};
  EXPECT_EQ(partial_auc(blind).raw, 0.0);
  EXPECT_EQ(partial_auc(blind).normalized, 0.0);
}

TEST(TprAtFpr, StepLookup) {
  auto c = hand_curve();
  EXPECT_EQ(tpr_at_fpr(c, 0.001), 0.5);
  EXPECT_EQ(tpr_at_fpr(c, 0.0001), 0.0);
  auto perfect = roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1});
  EXPECT_EQ(tpr_at_fpr(perfect.curve, 0.0), 1.0);
  EXPECT_EQ(tpr_at_fpr(perfect.curve, 0.01), 1.0);
}

TEST(Calibrate, ConstantNegatives) {
  std::vector<double> s(50, 0.1);
  std::vector<int> y(50, 0);
  auto c = calibrate_threshold(s, y, 0.01);
  EXPECT_GT(c.threshold, 0.1);
  EXPECT_LT(c.threshold, 0.1 + 1e-12);
  EXPECT_EQ(c.achieved_fpr, 0.0);
  EXPECT_TRUE(c.at_max_score);
}

TEST(Calibrate, RankConstructionGivesExactlyTenFalsePositives) {
  std::vector<double> s;
  std::vector<int> y;
  for (int r = 1; r <= 1000; ++r) {
    s.push_back(r / 1000.0);
    y.push_back(0);
  }
  auto c = calibrate_threshold(s, y, 0.01);
  EXPECT_EQ(c.false_positives, 10u);
  EXPECT_EQ(c.achieved_fpr, 0.01);
  EXPECT_FALSE(c.at_max_score);
}

TEST(Calibrate, NeverExceedsTarget) {
  Rng rng(12);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 50 + rng.below(500);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(0.5) ? 1 : 0;
      s[i] = rng.uniform();
    }
    if (std::count(y.begin(), y.end(), 0) == 0) continue;
    const double target = rng.uniform(0.0, 0.2);
    auto c = calibrate_threshold(s, y, target);
    EXPECT_LE(c.achieved_fpr, target + 1e-12);
    EXPECT_GE(c.achieved_fpr, target - 1.0 / static_cast<double>(c.negatives) - 1e-12);
    auto counts = confusion(s, y, c.threshold);
    EXPECT_EQ(counts.fp, c.false_positives);
  }
}

TEST(Delay, HandOracles) {
  auto timeline = [](std::string id, std::vector<double> scores) {
    ScoredTimeline t{std::move(id), 300.0, {}};
    for (std::size_t i = 0; i < scores.size(); ++i) t.instants.push_back({290.0 + 10.0 * i, scores[i]});
    return t;
  };
  std::vector<ScoredTimeline> tl{timeline("a", {0.9, 0.8, 0.1}), timeline("b", {0.1, 0.2, 0.7}),
                                 timeline("c", {0.1, 0.1, 0.1, 0.9})};
  auto d = detection_delay(tl, 0.5);
  ASSERT_TRUE(d.mean_seconds);
  EXPECT_EQ(*d.mean_seconds, 10.0);
  EXPECT_EQ(*d.per_experiment[0], 0.0);
  EXPECT_EQ(*d.per_experiment[1], 10.0);
  EXPECT_EQ(*d.per_experiment[2], 20.0);
  EXPECT_EQ(d.misses, 0u);

  auto missed = detection_delay(std::vector<ScoredTimeline>{timeline("m", {0.9, 0.1})}, 0.5);
  EXPECT_FALSE(missed.mean_seconds);
  EXPECT_EQ(missed.misses, 1u);
}

TEST(Delay, MonotoneInThreshold) {
  Rng rng(13);
  ScoredTimeline t{"x", 300.0, {}};
  for (int i = 0; i < 60; ++i) t.instants.push_back({10.0 * i, rng.uniform()});
  std::vector<ScoredTimeline> tl{t};
  double prev = -1.0;
  for (double thr = 0.0; thr <= 1.0; thr += 0.05) {
    auto d = detection_delay(tl, thr);
    if (!d.mean_seconds) break;
    EXPECT_GE(*d.mean_seconds, prev);
    prev = *d.mean_seconds;
  }
}

TEST(Report, JsonRoundTripAndTables) {
  std::vector<double> s{0.9, 0.8, 0.4, 0.6, 0.2, 0.7};
  std::vector<int> y{1, 1, 1, 0, 0, 0};
  auto rep = evaluate(s, y, 0.75);
  auto back = eval_report_from_json(nlohmann::json::parse(to_json(rep).dump()));
  EXPECT_EQ(to_json(back), to_json(rep));
  auto table = online_table("darts", rep);
  for (const char* col : {"Accuracy", "Precision", "Recall", "F1-Score", "AUC", "Delay @ Low FPR", "TPR @ Low FPR",
                          "FPR @ Low FPR"}) {
    EXPECT_NE(table.find(col), std::string::npos) << col;
  }
  EXPECT_NE(static_table("ffnn", rep).find("TPR: 1% FPR"), std::string::npos);
}

}  // namespace
}  // namespace malnas

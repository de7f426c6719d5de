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

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "malnas/error.hpp"
#include "malnas/tpe.hpp"

namespace malnas {
namespace {

std::vector<Observation> make_obs(std::vector<double> objectives) {
  std::vector<Observation> obs;
  for (std::size_t i = 0; i < objectives.size(); ++i) {
    obs.push_back({{{"x", std::int64_t(i)}}, objectives[i]});
  }
  return obs;
}

SearchSpace quadratic_space() {
  return SearchSpace({ParamSpec::int_range("x", 0, 40), ParamSpec::int_range("y", 0, 40)});
}

double quadratic(const Assignment& c) {
  const double x = as_number(c.at("x"));
  const double y = as_number(c.at("y"));
  return -((x - 27) * (x - 27) + (y - 11) * (y - 11));
}

TEST(SplitObservations, GammaQuarterOfFourKeepsTheMax) {
  auto split = split_observations(make_obs({0.1, 0.9, 0.4, 0.3}), 0.25);
  EXPECT_EQ(split.good, (std::vector<std::size_t>{1}));
  EXPECT_EQ(split.bad, (std::vector<std::size_t>{0, 2, 3}));
}

TEST(SplitObservations, TiesKeepInsertionOrder) {
  auto split = split_observations(make_obs({0.5, 0.5, 0.5, 0.5, 0.5}), 0.25);
  EXPECT_EQ(split.good, (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(split_observations(make_obs({0.5}), 0.25), UsageError);
}

TEST(SplitObservations, MatchesSortOracle) {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> values(10);
    for (auto& v : values) v = std::round(rng.uniform() * 5) / 5;
    auto split = split_observations(make_obs(values), 0.25);
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] > values[b]; });
    std::vector<std::size_t> good(order.begin(), order.begin() + 3);
    std::sort(good.begin(), good.end());
    EXPECT_EQ(split.good, good);
    EXPECT_EQ(split.good.size() + split.bad.size(), 10u);
  }
}

TEST(ParzenDensity, EmptyValuesGiveThePrior) {
  auto width = ParamSpec::int_range("width", 128, 1920, 128);
  ParzenDensity d(width, {});
  for (double m : d.masses()) EXPECT_NEAR(m, 1.0 / 15.0, 1e-12);

  auto lr = ParamSpec::real_range("lr", 1e-4, 1.0, std::nullopt, Distribution::loguniform);
  ParzenDensity p(lr, {});
  const double uniform_log = -std::log(std::log(1.0) - std::log(1e-4));
  EXPECT_NEAR(p.log_density(1e-3), uniform_log, 1e-12);
  EXPECT_NEAR(p.log_density(0.5), uniform_log, 1e-12);

  ParzenDensity c(ParamSpec::categorical("act", {"relu", "elu"}), {});
  EXPECT_NEAR(std::exp(c.log_density(std::string("elu"))), 0.5, 1e-12);
}

TEST(ParzenDensity, DropoutMassesSumToOne) {
  auto dropout = ParamSpec::real_range("dropout", 0.0, 0.5, 0.05, Distribution::quniform);
  for (auto values : {std::vector<ParamValue>{}, std::vector<ParamValue>{0.0}, std::vector<ParamValue>{0.15, 0.2, 0.5}}) {
    ParzenDensity d(dropout, values);
    ASSERT_EQ(d.masses().size(), 11u);
    EXPECT_NEAR(std::accumulate(d.masses().begin(), d.masses().end(), 0.0), 1.0, 1e-9);
  }
}

TEST(ParzenDensity, SingleValuePeaksAtItsCell) {
  auto dropout = ParamSpec::real_range("dropout", 0.0, 0.5, 0.05, Distribution::quniform);
  ParzenDensity d(dropout, {0.25});
  const auto& m = d.masses();
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (i != 5) EXPECT_GT(m[5], m[i]) << i;
  }
  auto batch = ParamSpec::int_range("batch", 128, 16384, 1024, Distribution::quniform);
  ParzenDensity b(batch, {std::int64_t{8192}});
  const auto& grid = b.grid();
  std::size_t peak = std::max_element(b.masses().begin(), b.masses().end()) - b.masses().begin();
  EXPECT_EQ(as_number(grid[peak]), 8192.0);
}

TEST(ParzenDensity, SmoothedCounts) {
  ParzenDensity c(ParamSpec::boolean("use_tags"), {true, true, false});
  EXPECT_NEAR(std::exp(c.log_density(true)), 3.0 / 5.0, 1e-12);
  EXPECT_NEAR(std::exp(c.log_density(false)), 2.0 / 5.0, 1e-12);
}

TEST(Suggest, WarmupReturnsGridSample) {
  const auto space = sorel_hyper_space();
  Rng rng(1);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(validate(suggest({}, space, {}, rng), space).empty());
}

TEST(Suggest, AlwaysOnGridAndInBounds) {
  const auto space = sorel_hyper_space();
  Rng rng(2);
  std::vector<Observation> obs;
  for (int i = 0; i < 12; ++i) {
    auto c = sample(space, rng);
    obs.push_back({c, rng.uniform()});
  }
  for (int i = 0; i < 100000; ++i) {
    auto c = suggest(obs, space, {.n_candidates = 2}, rng);
    auto v = validate(c, space);
    ASSERT_TRUE(v.empty()) << v.front().param << ": " << v.front().message;
  }
}

TEST(Suggest, ArgmaxAgreesWithExhaustiveGridOracle) {
  const auto space = SearchSpace({ParamSpec::int_range("x", 0, 6), ParamSpec::categorical("c", {"a", "b", "c"})});
  Rng rng(4);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Observation> obs;
    for (int i = 0; i < 12; ++i) obs.push_back({sample(space, rng), rng.uniform()});
    TpeModel model(space, obs, 0.25);
    double best = -1e300;
    Assignment oracle;
    for (const auto& x : grid_values(*space.find("x"))) {
      for (const auto& c : grid_values(*space.find("c"))) {
        Assignment a{{"x", x}, {"c", c}};
        const double r = model.log_ratio(a);
        // Joint log ratio is the sum of per-parameter ratios.
        EXPECT_NEAR(r, model.log_ratio("x", x) + model.log_ratio("c", c), 1e-12);
        if (r > best) {
          best = r;
          oracle = a;
        }
      }
    }
    auto s = suggest(obs, space, {.n_startup = 1, .n_candidates = 4000}, rng);
    EXPECT_EQ(canonical_key(s), canonical_key(oracle));
  }
}

TEST(Suggest, ConcentratedGoodObservationsRaiseThatPointsProbability) {
  const auto space = quadratic_space();
  Rng rng(5);
  std::vector<Observation> obs;
  for (int i = 0; i < 40; ++i) obs.push_back({{{"x", std::int64_t{20}}, {"y", std::int64_t{20}}}, 1.0});
  for (int i = 0; i < 120; ++i) obs.push_back({sample(space, rng), 0.0});
  int hits = 0;
  const int calls = 1000;
  for (int i = 0; i < calls; ++i) {
    auto c = suggest(obs, space, {}, rng);
    hits += as_number(c.at("x")) == 20 && as_number(c.at("y")) == 20;
  }
  EXPECT_GT(static_cast<double>(hits) / calls, 1.0 / (41.0 * 41.0));
}

TEST(Suggest, BeatsRandomSearchOnDiscreteQuadratic) {
  const auto space = quadratic_space();
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng tpe_rng(seed);
    Rng random_rng(seed + 1000);
    std::vector<Observation> obs;
    double tpe_best = -1e300;
    double random_best = -1e300;
    for (int t = 0; t < 50; ++t) {
      auto c = suggest(obs, space, {}, tpe_rng);
      obs.push_back({c, quadratic(c)});
      tpe_best = std::max(tpe_best, obs.back().objective);
      random_best = std::max(random_best, quadratic(sample(space, random_rng)));
    }
    wins += tpe_best > random_best;
  }
  EXPECT_GE(wins, 15);
}

TEST(RunTuning, SingleTrialWinsAndLedgerReproduces) {
  const auto space = tuning_space_for(ArchitectureConfig{}, ember_hyper_space());
  TrialEvaluator eval = [](const Assignment& c, Rng& rng) {
    const double f1 = std::clamp(1.0 - std::abs(std::log10(as_number(c.at("learning_rate"))) + 2.5) / 4 +
                                     0.01 * rng.uniform(), 0.0, 1.0);
    return std::vector<EpochMetrics>{{.epoch = 1, .val_loss = 1 - f1, .val_f1 = f1}};
  };
  auto one = run_tuning(space, eval, {.n_trials = 1, .seed = 3});
  ASSERT_TRUE(one.best);
  EXPECT_EQ(*one.best, 0u);
  EXPECT_EQ(one.ledger.phase, "tune");

  auto a = run_tuning(space, eval, {.n_trials = 25, .seed = 7});
  auto b = run_tuning(space, eval, {.n_trials = 25, .seed = 7});
  EXPECT_EQ(ledger_to_jsonl(a.ledger), ledger_to_jsonl(b.ledger));

  TrialLedger partial = a.ledger;
  partial.records.resize(15);
  int calls = 0;
  TrialEvaluator counting = [&](const Assignment& c, Rng& rng) {
    ++calls;
    return eval(c, rng);
  };
  auto resumed = run_tuning(space, counting, {.n_trials = 25, .seed = 7}, {.resume = &partial});
  EXPECT_EQ(calls, 10);
  EXPECT_EQ(ledger_to_jsonl(resumed.ledger), ledger_to_jsonl(a.ledger));

  auto by_loss = run_tuning(space, eval, {.n_trials = 12, .seed = 7, .selection = SelectionMetric::loss});
  ASSERT_TRUE(by_loss.best);
}

TEST(RunTuning, TagWeightOnlySuggestedWithTagHead) {
  ArchitectureConfig with_tags;
  with_tags.use_tags = true;
  EXPECT_TRUE(tuning_space_for(with_tags, sorel_hyper_space()).contains("tag_loss_weight"));
  EXPECT_FALSE(tuning_space_for(ArchitectureConfig{}, sorel_hyper_space()).contains("tag_loss_weight"));
  TrialEvaluator eval = [](const Assignment& c, Rng&) {
    EXPECT_EQ(c.count("tag_loss_weight"), 0u);
    return std::vector<EpochMetrics>{{.epoch = 1, .val_f1 = 0.5}};
  };
  run_tuning(tuning_space_for(ArchitectureConfig{}, sorel_hyper_space()), eval, {.n_trials = 12, .seed = 1});
}

TEST(RunTuning, InvalidParamsAreSpecErrors) {
  TrialEvaluator eval = [](const Assignment&, Rng&) { return std::vector<EpochMetrics>{}; };
  EXPECT_THROW(run_tuning(ember_hyper_space(), eval, {.n_trials = 2, .tpe = {.gamma = 1.0}}), SpecError);
  EXPECT_THROW(run_tuning(ember_hyper_space(), eval, {.n_trials = 0}), ConfigError);
}

}  // namespace
}  // namespace malnas

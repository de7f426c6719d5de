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

#include <set>

#include <gtest/gtest.h>

#include "malnas/error.hpp"
#include "malnas/search_space.hpp"

namespace malnas {
namespace {

Assignment found_sorel_architecture() {
  return {{"depth", std::int64_t{8}},          {"width", std::int64_t{1920}},
          {"activation", std::string("elu")},  {"use_counts", false},
          {"use_tags", true},                  {"tag_head_depth", std::int64_t{1}},
          {"tag_head_width", std::int64_t{112}}, {"tag_head_activation", std::string("elu")}};
}

Assignment found_ember_architecture() {
  return {{"depth", std::int64_t{3}}, {"width", std::int64_t{1664}}, {"activation", std::string("relu")}};
}

TEST(ParamSpec, RejectsInvalidDeclarations) {
  EXPECT_THROW(ParamSpec::int_range("x", 5, 1).check(), SpecError);
  EXPECT_THROW(ParamSpec::real_range("x", 0.0, 1.0, 0.0).check(), SpecError);
  EXPECT_THROW(ParamSpec::real_range("x", 0.0, 1.0, std::nullopt, Distribution::loguniform).check(), SpecError);
  EXPECT_THROW(ParamSpec::categorical("x", {}).check(), SpecError);
  EXPECT_THROW(ParamSpec::categorical("x", {"a", "a"}).check(), SpecError);
  EXPECT_THROW(SearchSpace({ParamSpec::boolean("a"), ParamSpec::boolean("a")}), SpecError);
}

TEST(Sample, QuniformReachesFoundSorelBatch) {
  auto spec = *sorel_hyper_space().find("batch_size");
  Rng rng(3);
  bool seen = false;
  for (int i = 0; i < 2000 && !seen; ++i) seen = std::get<std::int64_t>(sample(spec, rng)) == 3072;
  EXPECT_TRUE(seen);
  EXPECT_TRUE(on_grid(spec, std::int64_t{3072}));
}

TEST(Sample, QuniformClampsLowDrawsToMinimum) {
  auto spec = ParamSpec::int_range("b", 128, 16384, 1024, Distribution::quniform);
  Rng rng(4);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 20000; ++i) {
    auto v = std::get<std::int64_t>(sample(spec, rng));
    ASSERT_TRUE(v == 128 || v % 1024 == 0) << v;
    ASSERT_GE(v, 128);
    ASSERT_LE(v, 16384);
    seen.insert(v);
  }
  EXPECT_TRUE(seen.count(128));
  EXPECT_TRUE(seen.count(16384));
  EXPECT_FALSE(seen.count(0));
}

TEST(Sample, WidthGridIsMultiplesOf128) {
  auto spec = *sorel_architecture_space().find("width");
  Rng rng(5);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 5000; ++i) {
    auto v = std::get<std::int64_t>(sample(spec, rng));
    ASSERT_EQ(v % 128, 0);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 15u);
  EXPECT_TRUE(seen.count(1664));
}

TEST(Sample, LoguniformHalfMassBelowMidExponent) {
  auto spec = ParamSpec::real_range("lr", 1e-4, 1.0, std::nullopt, Distribution::loguniform);
  Rng rng(6);
  int low = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    double v = std::get<double>(sample(spec, rng));
    ASSERT_GE(v, 1e-4);
    ASSERT_LE(v, 1.0);
    if (v <= 1e-2) ++low;
  }
  EXPECT_NEAR(static_cast<double>(low) / n, 0.5, 0.01);
}

TEST(Sample, RealGridValuesPrintAsDecimals) {
  auto spec = ParamSpec::real_range("dropout", 0.0, 0.5, 0.05, Distribution::quniform);
  auto grid = grid_values(spec);
  ASSERT_EQ(grid.size(), 11u);
  EXPECT_EQ(std::get<double>(grid[6]), 0.3);
  EXPECT_EQ(to_string(grid[3]), "0.15");
}

TEST(Sample, SameSeedSameSequence) {
  auto space = sorel_architecture_space();
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(canonical_key(sample(space, a)), canonical_key(sample(space, b)));
}

TEST(Sample, EverySampleValidates) {
  for (const auto& space : {sorel_architecture_space(), ember_architecture_space(), sorel_hyper_space(),
                            ember_hyper_space()}) {
    Rng rng(8);
    for (int i = 0; i < 100000; ++i) {
      auto config = sample(space, rng);
      auto v = validate(config, space);
      ASSERT_TRUE(v.empty()) << canonical_key(config) << ": " << v.front().param << " " << v.front().message;
    }
  }
}

TEST(Validate, FoundConfigurationsAreValid) {
  EXPECT_TRUE(validate(found_sorel_architecture(), sorel_architecture_space()).empty());
  EXPECT_TRUE(validate(found_ember_architecture(), ember_architecture_space()).empty());

  Assignment sorel_hyper{{"batch_size", std::int64_t{3072}},
                         {"learning_rate", 0.000398},
                         {"dropout", 0.15},
                         {"tag_loss_weight", 0.70}};
  EXPECT_TRUE(validate(sorel_hyper, sorel_hyper_space()).empty());
  Assignment ember_hyper{{"batch_size", std::int64_t{1440}}, {"learning_rate", 0.000269}, {"dropout", 0.30}};
  EXPECT_TRUE(validate(ember_hyper, ember_hyper_space()).empty());
}

TEST(Validate, OffGridValuesAreReported) {
  auto arch = found_ember_architecture();
  arch["width"] = std::int64_t{1000};
  auto v = validate(arch, ember_architecture_space());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].param, "width");

  Assignment hyper{{"batch_size", std::int64_t{1440}}, {"learning_rate", 0.000269}, {"dropout", 0.07}};
  v = validate(hyper, ember_hyper_space());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].param, "dropout");
}

TEST(Validate, MissingUnknownAndWrongKind) {
  auto space = ember_architecture_space();
  Assignment config = found_ember_architecture();
  config.erase("depth");
  config["extra"] = true;
  config["activation"] = std::int64_t{1};
  auto v = validate(config, space);
  std::set<std::string> params;
  for (const auto& x : v) params.insert(x.param);
  EXPECT_EQ(params, (std::set<std::string>{"depth", "extra", "activation"}));
}

TEST(CanonicalKey, DistinguishesConfigs) {
  auto a = found_sorel_architecture();
  auto b = a;
  EXPECT_EQ(canonical_key(a), canonical_key(b));
  b["tag_head_width"] = std::int64_t{96};
  EXPECT_NE(canonical_key(a), canonical_key(b));
}

TEST(CanonicalKey, CollisionsOnlyBetweenEqualConfigs) {
  auto space = sorel_architecture_space();
  Rng rng(9);
  std::map<std::string, Assignment> by_key;
  for (int i = 0; i < 10000; ++i) {
    auto config = sample(space, rng);
    auto [it, inserted] = by_key.emplace(canonical_key(config), config);
    if (!inserted) EXPECT_EQ(it->second, config);
  }
}

TEST(Cardinality, ProductOfGridSizes) {
  EXPECT_EQ(grid_cardinality(SearchSpace({ParamSpec::boolean("a"), ParamSpec::boolean("b")})), 4u);
  // depth 14, width 15, activation 2, tag depth 3, tag width 7, tag activation 2, two booleans.
  EXPECT_EQ(grid_cardinality(sorel_architecture_space()), 14u * 15 * 2 * 3 * 7 * 2 * 2 * 2);
  EXPECT_EQ(grid_cardinality(sorel_architecture_space()), 70560u);
  EXPECT_EQ(grid_cardinality(SearchSpace({ParamSpec::categorical("c", {"x", "y", "z"})})), 3u);
  EXPECT_THROW(grid_cardinality(sorel_hyper_space()), UnsupportedError);
}

TEST(TypedConfig, RoundTripsThroughAssignments) {
  auto arch = architecture_from(found_sorel_architecture());
  EXPECT_EQ(arch.depth, 8);
  EXPECT_EQ(arch.width, 1920);
  EXPECT_EQ(arch.tag_head_activation, Activation::elu);
  EXPECT_TRUE(arch.use_tags);
  EXPECT_FALSE(arch.use_counts);
  EXPECT_EQ(complexity(arch), 15360.0);
  EXPECT_EQ(to_assignment(arch, sorel_architecture_space()), found_sorel_architecture());
  EXPECT_EQ(to_assignment(arch, ember_architecture_space()).size(), 3u);
}

TEST(TypedConfig, TuningSpaceDropsInertWeights) {
  ArchitectureConfig arch;
  arch.use_tags = false;
  EXPECT_FALSE(tuning_space_for(arch, sorel_hyper_space()).contains("tag_loss_weight"));
  arch.use_tags = true;
  EXPECT_TRUE(tuning_space_for(arch, sorel_hyper_space()).contains("tag_loss_weight"));
}

TEST(Json, SpacesAndAssignmentsRoundTrip) {
  auto space = sorel_hyper_space();
  auto back = search_space_from_json(nlohmann::json::parse(to_json(space).dump()));
  EXPECT_EQ(back.fingerprint(), space.fingerprint());
  EXPECT_EQ(search_space_from_json("ember-architecture").fingerprint(), ember_architecture_space().fingerprint());
  EXPECT_THROW(search_space_from_json("nope"), SpecError);

  Assignment hyper{{"batch_size", std::int64_t{3072}}, {"learning_rate", 0.000398}, {"dropout", 0.15},
                   {"tag_loss_weight", 0.7}};
  EXPECT_EQ(assignment_from_json(nlohmann::json::parse(to_json(hyper).dump()), &space), hyper);
}

TEST(Json, FingerprintIgnoresDeclarationOrder) {
  auto a = SearchSpace({ParamSpec::boolean("a"), ParamSpec::int_range("b", 1, 4)});
  auto b = SearchSpace({ParamSpec::int_range("b", 1, 4), ParamSpec::boolean("a")});
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), SearchSpace({ParamSpec::boolean("a")}).fingerprint());
}

}  // namespace
}  // namespace malnas

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

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "malnas/ops.hpp"
#include "malnas/rng.hpp"

namespace malnas {

enum class ParamKind { int_range, real_range, categorical, boolean };
enum class Distribution { uniform, quniform, loguniform };

std::string_view to_string(ParamKind kind);
std::string_view to_string(Distribution dist);

// One bounded, optionally gridded search dimension.
//
// Sampling semantics:
//   uniform + granularity g : min + k*g for k uniform over the feasible range
//   uniform, no granularity : continuous Uniform(min, max) (real_range only)
//   quniform with step q    : clamp(round(u/q)*q, min, max), u ~ Uniform(min, max)
//   loguniform              : exp(Uniform(ln min, ln max))
//   categorical / boolean   : uniform over the choices
struct ParamSpec {
  std::string name;
  ParamKind kind = ParamKind::int_range;
  double min = 0.0;
  double max = 0.0;
  std::optional<double> granularity;
  Distribution distribution = Distribution::uniform;
  std::vector<std::string> choices;

  static ParamSpec int_range(std::string name, std::int64_t min, std::int64_t max, std::int64_t step = 1,
                             Distribution dist = Distribution::uniform);
  static ParamSpec real_range(std::string name, double min, double max, std::optional<double> step,
                              Distribution dist = Distribution::uniform);
  static ParamSpec categorical(std::string name, std::vector<std::string> choices);
  static ParamSpec boolean(std::string name);

  // Throws SpecError when the invariants do not hold.
  void check() const;
  // True when the values form a finite set.
  bool is_discrete() const;
};

using ParamValue = std::variant<std::int64_t, double, bool, std::string>;
// Ordered by name, so iteration order is canonical.
using Assignment = std::map<std::string, ParamValue>;

std::string to_string(const ParamValue& value);
double as_number(const ParamValue& value);

class SearchSpace {
 public:
  SearchSpace() = default;
  explicit SearchSpace(std::vector<ParamSpec> specs);

  const std::vector<ParamSpec>& specs() const { return specs_; }
  const ParamSpec* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  SearchSpace without(std::string_view name) const;

  // Content hash of the declaration (order-independent).
  std::string fingerprint() const;

 private:
  std::vector<ParamSpec> specs_;
};

ParamValue sample(const ParamSpec& spec, Rng& rng);
Assignment sample(const SearchSpace& space, Rng& rng);

// Sorted feasible values of a discrete spec; UnsupportedError otherwise.
std::vector<ParamValue> grid_values(const ParamSpec& spec);

// Rounds grid arithmetic (k*q) to the decimal value it denotes, so that
// e.g. 6*0.05 compares and prints as 0.3.
double snap_decimal(double value);

struct Violation {
  std::string param;
  std::string message;
};

// Empty iff every declared parameter is present, of the right kind,
// in bounds and on grid, and no undeclared parameter is present.
std::vector<Violation> validate(const Assignment& config, const SearchSpace& space);
bool on_grid(const ParamSpec& spec, const ParamValue& value);

// Deterministic, order-independent identity: equal configs <=> equal keys.
std::string canonical_key(const Assignment& config);

// Product of per-parameter grid sizes; UnsupportedError for continuous specs.
std::uint64_t grid_cardinality(const SearchSpace& space);

// ---------------------------------------------------------------------------
// Typed configurations
// ---------------------------------------------------------------------------

struct ArchitectureConfig {
  int depth = 1;
  int width = 128;
  Activation activation = Activation::relu;
  bool use_counts = false;
  bool use_tags = false;
  // Inert unless use_tags.
  int tag_head_depth = 1;
  int tag_head_width = 16;
  Activation tag_head_activation = Activation::relu;
};

struct HyperConfig {
  int batch_size = 256;
  double learning_rate = 1e-3;
  double dropout = 0.0;
  double tag_loss_weight = 0.1;
  double count_loss_weight = 0.1;
};

// Fields the assignment lacks keep their defaults.
ArchitectureConfig architecture_from(const Assignment& config);
HyperConfig hyper_from(const Assignment& config, const HyperConfig& defaults = {});
// Only the parameters the space declares are emitted.
Assignment to_assignment(const ArchitectureConfig& arch, const SearchSpace& space);
Assignment to_assignment(const HyperConfig& hyper, const SearchSpace& space);

// Width * depth of the trunk.
double complexity(const ArchitectureConfig& arch);

// ---------------------------------------------------------------------------
// Preset spaces (published search bounds)
// ---------------------------------------------------------------------------

SearchSpace sorel_architecture_space();
// Without the SOREL-only head parameters.
SearchSpace ember_architecture_space();
SearchSpace sorel_hyper_space();
SearchSpace ember_hyper_space();

// The tuning space for a fixed architecture: auxiliary-loss weights are only
// searched when the corresponding head exists.
SearchSpace tuning_space_for(const ArchitectureConfig& arch, const SearchSpace& base);

// ---------------------------------------------------------------------------
// JSON forms (config-file keys: name, kind, min, max, granularity,
// distribution, choices)
// ---------------------------------------------------------------------------

nlohmann::json to_json(const ParamSpec& spec);
ParamSpec param_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SearchSpace& space);
// Accepts an array of specs or a preset name ("sorel-architecture",
// "ember-architecture", "sorel-hyper", "ember-hyper").
SearchSpace search_space_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Assignment& config);
Assignment assignment_from_json(const nlohmann::json& j, const SearchSpace* space = nullptr);

}  // namespace malnas

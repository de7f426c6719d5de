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

#include "malnas/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "malnas/error.hpp"
#include "malnas/io.hpp"

namespace malnas {

std::string_view to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::int_range: return "int";
    case ParamKind::real_range: return "real";
    case ParamKind::categorical: return "categorical";
    case ParamKind::boolean: return "boolean";
  }
  return "?";
}

std::string_view to_string(Distribution dist) {
  switch (dist) {
    case Distribution::uniform: return "uniform";
    case Distribution::quniform: return "quniform";
    case Distribution::loguniform: return "loguniform";
  }
  return "?";
}

namespace {

ParamKind parse_kind(const std::string& s) {
  if (s == "int" || s == "int-range") return ParamKind::int_range;
  if (s == "real" || s == "real-range") return ParamKind::real_range;
  if (s == "categorical") return ParamKind::categorical;
  if (s == "boolean" || s == "bool") return ParamKind::boolean;
  throw SpecError("unknown parameter kind '" + s + "'");
}

Distribution parse_distribution(const std::string& s) {
  if (s == "uniform") return Distribution::uniform;
  if (s == "quniform") return Distribution::quniform;
  if (s == "loguniform") return Distribution::loguniform;
  throw SpecError("unknown distribution '" + s + "'");
}

bool is_numeric(ParamKind kind) { return kind == ParamKind::int_range || kind == ParamKind::real_range; }

ParamValue numeric_value(const ParamSpec& spec, double v) {
  if (spec.kind == ParamKind::int_range) return static_cast<std::int64_t>(std::llround(v));
  return snap_decimal(v);
}

bool near(double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); }

}  // namespace

double snap_decimal(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", value);
  return std::strtod(buf, nullptr);
}

ParamSpec ParamSpec::int_range(std::string name, std::int64_t min, std::int64_t max, std::int64_t step,
                               Distribution dist) {
  ParamSpec s;
  s.name = std::move(name);
  s.kind = ParamKind::int_range;
  s.min = static_cast<double>(min);
  s.max = static_cast<double>(max);
  s.granularity = static_cast<double>(step);
  s.distribution = dist;
  return s;
}

ParamSpec ParamSpec::real_range(std::string name, double min, double max, std::optional<double> step,
                                Distribution dist) {
  ParamSpec s;
  s.name = std::move(name);
  s.kind = ParamKind::real_range;
  s.min = min;
  s.max = max;
  s.granularity = step;
  s.distribution = dist;
  return s;
}

ParamSpec ParamSpec::categorical(std::string name, std::vector<std::string> choices) {
  ParamSpec s;
  s.name = std::move(name);
  s.kind = ParamKind::categorical;
  s.choices = std::move(choices);
  return s;
}

ParamSpec ParamSpec::boolean(std::string name) {
  ParamSpec s;
  s.name = std::move(name);
  s.kind = ParamKind::boolean;
  return s;
}

void ParamSpec::check() const {
  if (name.empty()) throw SpecError("parameter without a name");
  switch (kind) {
    case ParamKind::categorical: {
      if (choices.empty()) throw SpecError(name + ": categorical needs at least one choice");
      std::set<std::string> distinct(choices.begin(), choices.end());
      if (distinct.size() != choices.size()) throw SpecError(name + ": duplicate categorical choices");
      return;
    }
    case ParamKind::boolean:
      return;
    case ParamKind::int_range:
    case ParamKind::real_range:
      break;
  }
  if (!std::isfinite(min) || !std::isfinite(max)) throw SpecError(name + ": bounds must be finite");
  if (min > max) throw SpecError(name + ": min exceeds max");
  if (granularity && !(*granularity > 0.0)) throw SpecError(name + ": granularity must be positive");
  if (distribution == Distribution::loguniform) {
    if (!(min > 0.0)) throw SpecError(name + ": loguniform needs min > 0");
    if (granularity) throw SpecError(name + ": loguniform does not take a granularity");
  }
  if (distribution == Distribution::quniform && !granularity) throw SpecError(name + ": quniform needs a granularity");
  if (kind == ParamKind::int_range) {
    if (min != std::floor(min) || max != std::floor(max)) throw SpecError(name + ": int bounds must be integers");
    if (granularity && *granularity != std::floor(*granularity)) throw SpecError(name + ": int granularity must be an integer");
    if (distribution == Distribution::uniform && !granularity) throw SpecError(name + ": int range needs a granularity");
  }
}

bool ParamSpec::is_discrete() const {
  if (!is_numeric(kind)) return true;
  return distribution != Distribution::loguniform && granularity.has_value();
}

std::string to_string(const ParamValue& value) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, std::int64_t>) {
          return std::to_string(v);
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(v);
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else {
          return nlohmann::json(v).dump();
        }
      },
      value);
}

double as_number(const ParamValue& value) {
  if (auto i = std::get_if<std::int64_t>(&value)) return static_cast<double>(*i);
  if (auto d = std::get_if<double>(&value)) return *d;
  if (auto b = std::get_if<bool>(&value)) return *b ? 1.0 : 0.0;
  throw SpecError("value " + to_string(value) + " is not numeric");
}

SearchSpace::SearchSpace(std::vector<ParamSpec> specs) : specs_(std::move(specs)) {
  std::set<std::string> names;
  for (const auto& s : specs_) {
    s.check();
    if (!names.insert(s.name).second) throw SpecError("duplicate parameter '" + s.name + "'");
  }
}

const ParamSpec* SearchSpace::find(std::string_view name) const {
  for (const auto& s : specs_) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

SearchSpace SearchSpace::without(std::string_view name) const {
  std::vector<ParamSpec> kept;
  for (const auto& s : specs_) {
    if (s.name != name) kept.push_back(s);
  }
  return SearchSpace(std::move(kept));
}

std::string SearchSpace::fingerprint() const {
  auto sorted = specs_;
  std::sort(sorted.begin(), sorted.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  return sha256_hex(to_json(SearchSpace(std::move(sorted))).dump()).substr(0, 16);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

ParamValue sample(const ParamSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case ParamKind::categorical:
      return spec.choices[rng.below(spec.choices.size())];
    case ParamKind::boolean:
      return rng.below(2) == 1;
    case ParamKind::int_range:
    case ParamKind::real_range:
      break;
  }
  switch (spec.distribution) {
    case Distribution::loguniform: {
      double v = std::exp(rng.uniform(std::log(spec.min), std::log(spec.max)));
      v = std::clamp(v, spec.min, spec.max);
      if (spec.kind == ParamKind::int_range) return static_cast<std::int64_t>(std::llround(v));
      return v;
    }
    case Distribution::quniform: {
      const double q = *spec.granularity;
      const double u = rng.uniform(spec.min, spec.max);
      return numeric_value(spec, std::clamp(std::round(u / q) * q, spec.min, spec.max));
    }
    case Distribution::uniform: {
      if (!spec.granularity) return rng.uniform(spec.min, spec.max);
      const double g = *spec.granularity;
      const auto steps = static_cast<std::uint64_t>(std::floor((spec.max - spec.min) / g + 1e-9));
      const auto k = rng.below(steps + 1);
      return numeric_value(spec, spec.min + static_cast<double>(k) * g);
    }
  }
  throw SpecError("unreachable distribution");
}

Assignment sample(const SearchSpace& space, Rng& rng) {
  Assignment out;
  for (const auto& spec : space.specs()) out[spec.name] = sample(spec, rng);
  return out;
}

std::vector<ParamValue> grid_values(const ParamSpec& spec) {
  spec.check();
  std::vector<ParamValue> out;
  switch (spec.kind) {
    case ParamKind::categorical:
      for (const auto& c : spec.choices) out.emplace_back(c);
      return out;
    case ParamKind::boolean:
      return {false, true};
    case ParamKind::int_range:
    case ParamKind::real_range:
      break;
  }
  if (!spec.is_discrete()) throw UnsupportedError(spec.name + ": continuous parameter has no finite grid");
  const double g = *spec.granularity;
  std::vector<double> values;
  if (spec.distribution == Distribution::quniform) {
    const auto lo = static_cast<long long>(std::llround(spec.min / g));
    const auto hi = static_cast<long long>(std::llround(spec.max / g));
    for (long long k = lo; k <= hi; ++k) {
      values.push_back(std::clamp(static_cast<double>(k) * g, spec.min, spec.max));
    }
  } else {
    const auto steps = static_cast<long long>(std::floor((spec.max - spec.min) / g + 1e-9));
    for (long long k = 0; k <= steps; ++k) values.push_back(spec.min + static_cast<double>(k) * g);
  }
  std::vector<double> distinct;
  for (double v : values) {
    if (distinct.empty() || !near(v, distinct.back())) distinct.push_back(v);
  }
  for (double v : distinct) out.push_back(numeric_value(spec, v));
  return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

bool on_grid(const ParamSpec& spec, const ParamValue& value) {
  switch (spec.kind) {
    case ParamKind::categorical: {
      auto s = std::get_if<std::string>(&value);
      return s && std::find(spec.choices.begin(), spec.choices.end(), *s) != spec.choices.end();
    }
    case ParamKind::boolean:
      return std::holds_alternative<bool>(value);
    case ParamKind::int_range:
      if (!std::holds_alternative<std::int64_t>(value)) return false;
      break;
    case ParamKind::real_range:
      if (!std::holds_alternative<double>(value) && !std::holds_alternative<std::int64_t>(value)) return false;
      break;
  }
  const double v = as_number(value);
  if (!std::isfinite(v)) return false;
  const double tol = 1e-9 * std::max(1.0, std::abs(spec.max));
  if (v < spec.min - tol || v > spec.max + tol) return false;
  if (!spec.is_discrete()) return true;
  const double g = *spec.granularity;
  if (spec.distribution == Distribution::quniform) {
    // Multiples of q, or a bound reached by clamping.
    if (near(v, spec.min) || near(v, spec.max)) return true;
    return near(v / g, std::round(v / g));
  }
  const double k = (v - spec.min) / g;
  return near(k, std::round(k));
}

std::vector<Violation> validate(const Assignment& config, const SearchSpace& space) {
  std::vector<Violation> out;
  for (const auto& spec : space.specs()) {
    auto it = config.find(spec.name);
    if (it == config.end()) {
      out.push_back({spec.name, "missing"});
      continue;
    }
    if (!on_grid(spec, it->second)) {
      out.push_back({spec.name, "value " + to_string(it->second) + " is off-grid, out of bounds or of the wrong kind"});
    }
  }
  for (const auto& [name, value] : config) {
    if (!space.contains(name)) out.push_back({name, "not declared in the search space"});
  }
  return out;
}

std::string canonical_key(const Assignment& config) {
  std::string key;
  for (const auto& [name, value] : config) {
    key += name;
    key += '=';
    key += to_string(value);
    key += ';';
  }
  return key;
}

std::uint64_t grid_cardinality(const SearchSpace& space) {
  std::uint64_t n = 1;
  for (const auto& spec : space.specs()) {
    if (!spec.is_discrete()) throw UnsupportedError("grid_cardinality: '" + spec.name + "' is continuous");
    n *= grid_values(spec).size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Typed configurations
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::optional<T> lookup(const Assignment& config, const std::string& name) {
  auto it = config.find(name);
  if (it == config.end()) return std::nullopt;
  if constexpr (std::is_same_v<T, double>) {
    return as_number(it->second);
  } else if constexpr (std::is_same_v<T, int>) {
    return static_cast<int>(std::llround(as_number(it->second)));
  } else if constexpr (std::is_same_v<T, bool>) {
    if (auto b = std::get_if<bool>(&it->second)) return *b;
    if (auto s = std::get_if<std::string>(&it->second)) return *s == "true" || *s == "True";
    return as_number(it->second) != 0.0;
  } else {
    if (auto s = std::get_if<std::string>(&it->second)) return *s;
    throw SpecError(name + " must be a string");
  }
}

void put(Assignment& out, const SearchSpace& space, const std::string& name, ParamValue value) {
  const ParamSpec* spec = space.find(name);
  if (!spec) return;
  if (spec->kind == ParamKind::int_range) value = static_cast<std::int64_t>(std::llround(as_number(value)));
  if (spec->kind == ParamKind::real_range) value = as_number(value);
  out[name] = std::move(value);
}

}  // namespace

ArchitectureConfig architecture_from(const Assignment& config) {
  ArchitectureConfig a;
  if (auto v = lookup<int>(config, "depth")) a.depth = *v;
  if (auto v = lookup<int>(config, "width")) a.width = *v;
  if (auto v = lookup<std::string>(config, "activation")) a.activation = parse_activation(*v);
  if (auto v = lookup<bool>(config, "use_counts")) a.use_counts = *v;
  if (auto v = lookup<bool>(config, "use_tags")) a.use_tags = *v;
  if (auto v = lookup<int>(config, "tag_head_depth")) a.tag_head_depth = *v;
  if (auto v = lookup<int>(config, "tag_head_width")) a.tag_head_width = *v;
  if (auto v = lookup<std::string>(config, "tag_head_activation")) a.tag_head_activation = parse_activation(*v);
  return a;
}

HyperConfig hyper_from(const Assignment& config, const HyperConfig& defaults) {
  HyperConfig h = defaults;
  if (auto v = lookup<int>(config, "batch_size")) h.batch_size = *v;
  if (auto v = lookup<double>(config, "learning_rate")) h.learning_rate = *v;
  if (auto v = lookup<double>(config, "dropout")) h.dropout = *v;
  if (auto v = lookup<double>(config, "tag_loss_weight")) h.tag_loss_weight = *v;
  if (auto v = lookup<double>(config, "count_loss_weight")) h.count_loss_weight = *v;
  return h;
}

Assignment to_assignment(const ArchitectureConfig& arch, const SearchSpace& space) {
  Assignment out;
  put(out, space, "depth", std::int64_t{arch.depth});
  put(out, space, "width", std::int64_t{arch.width});
  put(out, space, "activation", std::string(to_string(arch.activation)));
  put(out, space, "use_counts", arch.use_counts);
  put(out, space, "use_tags", arch.use_tags);
  put(out, space, "tag_head_depth", std::int64_t{arch.tag_head_depth});
  put(out, space, "tag_head_width", std::int64_t{arch.tag_head_width});
  put(out, space, "tag_head_activation", std::string(to_string(arch.tag_head_activation)));
  return out;
}

Assignment to_assignment(const HyperConfig& hyper, const SearchSpace& space) {
  Assignment out;
  put(out, space, "batch_size", std::int64_t{hyper.batch_size});
  put(out, space, "learning_rate", hyper.learning_rate);
  put(out, space, "dropout", hyper.dropout);
  put(out, space, "tag_loss_weight", hyper.tag_loss_weight);
  put(out, space, "count_loss_weight", hyper.count_loss_weight);
  return out;
}

double complexity(const ArchitectureConfig& arch) {
  return static_cast<double>(arch.width) * static_cast<double>(arch.depth);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace {

std::vector<ParamSpec> trunk_params() {
  return {ParamSpec::int_range("depth", 1, 14, 1), ParamSpec::int_range("width", 128, 1920, 128),
          ParamSpec::categorical("activation", {"relu", "elu"})};
}

}  // namespace

SearchSpace sorel_architecture_space() {
  auto specs = trunk_params();
  specs.push_back(ParamSpec::int_range("tag_head_depth", 1, 3, 1));
  specs.push_back(ParamSpec::int_range("tag_head_width", 16, 112, 16));
  specs.push_back(ParamSpec::categorical("tag_head_activation", {"relu", "elu"}));
  specs.push_back(ParamSpec::boolean("use_counts"));
  specs.push_back(ParamSpec::boolean("use_tags"));
  return SearchSpace(std::move(specs));
}

SearchSpace ember_architecture_space() { return SearchSpace(trunk_params()); }

SearchSpace sorel_hyper_space() {
  return SearchSpace({
      ParamSpec::int_range("batch_size", 128, 16384, 1024, Distribution::quniform),
      ParamSpec::real_range("learning_rate", 0.0001, 1.0, std::nullopt, Distribution::loguniform),
      ParamSpec::real_range("dropout", 0.0, 0.5, 0.05, Distribution::quniform),
      ParamSpec::real_range("tag_loss_weight", 0.0, 1.0, 0.05, Distribution::quniform),
  });
}

SearchSpace ember_hyper_space() {
  return SearchSpace({
      ParamSpec::int_range("batch_size", 32, 8192, 32, Distribution::quniform),
      ParamSpec::real_range("learning_rate", 0.0001, 1.0, std::nullopt, Distribution::loguniform),
      ParamSpec::real_range("dropout", 0.0, 0.5, 0.05, Distribution::quniform),
  });
}

SearchSpace tuning_space_for(const ArchitectureConfig& arch, const SearchSpace& base) {
  SearchSpace space = base;
  if (!arch.use_tags && space.contains("tag_loss_weight")) space = space.without("tag_loss_weight");
  if (!arch.use_counts && space.contains("count_loss_weight")) space = space.without("count_loss_weight");
  return space;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

nlohmann::json to_json(const ParamSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["kind"] = to_string(spec.kind);
  if (is_numeric(spec.kind)) {
    if (spec.kind == ParamKind::int_range) {
      j["min"] = static_cast<std::int64_t>(spec.min);
      j["max"] = static_cast<std::int64_t>(spec.max);
      if (spec.granularity) j["granularity"] = static_cast<std::int64_t>(*spec.granularity);
    } else {
      j["min"] = spec.min;
      j["max"] = spec.max;
      if (spec.granularity) j["granularity"] = *spec.granularity;
    }
    j["distribution"] = to_string(spec.distribution);
  }
  if (spec.kind == ParamKind::categorical) j["choices"] = spec.choices;
  return j;
}

ParamSpec param_spec_from_json(const nlohmann::json& j) {
  try {
    ParamSpec s;
    s.name = j.at("name").get<std::string>();
    s.kind = parse_kind(j.at("kind").get<std::string>());
    if (is_numeric(s.kind)) {
      s.min = j.at("min").get<double>();
      s.max = j.at("max").get<double>();
      if (j.contains("granularity") && !j["granularity"].is_null()) s.granularity = j["granularity"].get<double>();
      s.distribution = parse_distribution(j.value("distribution", std::string("uniform")));
    }
    if (s.kind == ParamKind::categorical) s.choices = j.at("choices").get<std::vector<std::string>>();
    s.check();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("malformed parameter spec: ") + e.what());
  }
}

nlohmann::json to_json(const SearchSpace& space) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : space.specs()) arr.push_back(to_json(s));
  return arr;
}

SearchSpace search_space_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "sorel-architecture") return sorel_architecture_space();
    if (name == "ember-architecture") return ember_architecture_space();
    if (name == "sorel-hyper") return sorel_hyper_space();
    if (name == "ember-hyper") return ember_hyper_space();
    throw SpecError("unknown search-space preset '" + name + "'");
  }
  if (!j.is_array()) throw SpecError("search space must be an array of parameter specs or a preset name");
  std::vector<ParamSpec> specs;
  for (const auto& item : j) specs.push_back(param_spec_from_json(item));
  return SearchSpace(std::move(specs));
}

nlohmann::json to_json(const Assignment& config) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, value] : config) {
    std::visit([&](const auto& v) { j[name] = v; }, value);
  }
  return j;
}

Assignment assignment_from_json(const nlohmann::json& j, const SearchSpace* space) {
  if (!j.is_object()) throw SpecError("configuration must be an object");
  Assignment out;
  for (const auto& [name, v] : j.items()) {
    const ParamSpec* spec = space ? space->find(name) : nullptr;
    if (spec && spec->kind == ParamKind::int_range && v.is_number()) {
      out[name] = static_cast<std::int64_t>(std::llround(v.get<double>()));
    } else if (spec && spec->kind == ParamKind::real_range && v.is_number()) {
      out[name] = v.get<double>();
    } else if (v.is_boolean()) {
      out[name] = v.get<bool>();
    } else if (v.is_number_integer()) {
      out[name] = v.get<std::int64_t>();
    } else if (v.is_number()) {
      out[name] = v.get<double>();
    } else if (v.is_string()) {
      out[name] = v.get<std::string>();
    } else {
      throw SpecError("unsupported value for '" + name + "'");
    }
  }
  return out;
}

}  // namespace malnas

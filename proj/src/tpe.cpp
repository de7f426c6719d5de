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

#include "malnas/tpe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "malnas/error.hpp"

namespace malnas {

void TpeParams::check() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw SpecError("tpe gamma must be in (0, 1)");
  if (n_startup < 1) throw SpecError("tpe n_startup must be at least 1");
  if (n_candidates < 1) throw SpecError("tpe n_candidates must be at least 1");
}

ObservationSplit split_observations(const std::vector<Observation>& obs, double gamma) {
  if (obs.size() < 2) throw UsageError("split_observations needs at least two observations");
  std::vector<std::size_t> order(obs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return obs[a].objective > obs[b].objective; });
  const auto n_good = static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(obs.size()) - 1e-12));
  ObservationSplit split;
  split.good.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::max<std::size_t>(n_good, 1)));
  split.bad.assign(order.begin() + static_cast<std::ptrdiff_t>(split.good.size()), order.end());
  std::sort(split.good.begin(), split.good.end());
  std::sort(split.bad.begin(), split.bad.end());
  return split;
}

namespace {

constexpr double kLogFloor = -700.0;

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

double safe_log(double p) { return p > 0.0 ? std::max(std::log(p), kLogFloor) : kLogFloor; }

}  // namespace

ParzenDensity::ParzenDensity(const ParamSpec& spec, const std::vector<ParamValue>& values) : spec_(spec) {
  spec_.check();
  const bool numeric = spec.kind == ParamKind::int_range || spec.kind == ParamKind::real_range;
  if (!numeric) {
    space_ = Space::counts;
    grid_ = grid_values(spec_);
    std::vector<double> counts(grid_.size(), 0.0);
    for (const auto& v : values) counts[grid_index(v)] += 1.0;
    const double total = static_cast<double>(values.size() + grid_.size());
    for (double c : counts) masses_.push_back((c + 1.0) / total);
    return;
  }

  if (spec.is_discrete()) {
    grid_ = grid_values(spec_);
    if (spec.distribution == Distribution::quniform) {
      space_ = Space::value;
      lo_ = spec.min;
      hi_ = spec.max;
      cell_edges_.push_back(lo_);
      for (std::size_t i = 0; i + 1 < grid_.size(); ++i) {
        cell_edges_.push_back(0.5 * (as_number(grid_[i]) + as_number(grid_[i + 1])));
      }
      cell_edges_.push_back(hi_);
    } else {
      space_ = Space::index;
      lo_ = -0.5;
      hi_ = static_cast<double>(grid_.size()) - 0.5;
      for (std::size_t i = 0; i <= grid_.size(); ++i) cell_edges_.push_back(static_cast<double>(i) - 0.5);
    }
  } else if (spec.distribution == Distribution::loguniform) {
    space_ = Space::log_value;
    lo_ = std::log(spec.min);
    hi_ = std::log(spec.max);
  } else {
    space_ = Space::value;
    lo_ = spec.min;
    hi_ = spec.max;
  }

  for (const auto& v : values) {
    mus_.push_back(space_ == Space::index ? static_cast<double>(grid_index(v)) : to_kernel(as_number(v)));
  }
  std::sort(mus_.begin(), mus_.end());
  const double range = hi_ - lo_;
  const double floor_bw = mus_.empty() ? range : range / std::min(100.0, static_cast<double>(mus_.size()));
  for (std::size_t i = 0; i < mus_.size(); ++i) {
    double gap = 0.0;
    if (i > 0) gap = std::max(gap, mus_[i] - mus_[i - 1]);
    if (i + 1 < mus_.size()) gap = std::max(gap, mus_[i + 1] - mus_[i]);
    sigmas_.push_back(std::clamp(gap, floor_bw, range));
  }

  if (!grid_.empty()) {
    double total = 0.0;
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      masses_.push_back(std::max(0.0, mixture_cdf(cell_edges_[i + 1]) - mixture_cdf(cell_edges_[i])));
      total += masses_.back();
    }
    for (double& m : masses_) m /= total;
  }
}

double ParzenDensity::to_kernel(double v) const { return space_ == Space::log_value ? std::log(v) : v; }

double ParzenDensity::mixture_cdf(double x) const {
  const double w = 1.0 / static_cast<double>(mus_.size() + 1);
  double acc = std::clamp((x - lo_) / (hi_ - lo_), 0.0, 1.0);
  for (std::size_t k = 0; k < mus_.size(); ++k) {
    const double a = normal_cdf((lo_ - mus_[k]) / sigmas_[k]);
    const double b = normal_cdf((hi_ - mus_[k]) / sigmas_[k]);
    const double c = normal_cdf((std::clamp(x, lo_, hi_) - mus_[k]) / sigmas_[k]);
    acc += (c - a) / std::max(b - a, 1e-300);
  }
  return w * acc;
}

double ParzenDensity::mixture_pdf(double x) const {
  if (x < lo_ || x > hi_) return 0.0;
  const double w = 1.0 / static_cast<double>(mus_.size() + 1);
  double acc = 1.0 / (hi_ - lo_);
  for (std::size_t k = 0; k < mus_.size(); ++k) {
    const double z = (x - mus_[k]) / sigmas_[k];
    const double a = normal_cdf((lo_ - mus_[k]) / sigmas_[k]);
    const double b = normal_cdf((hi_ - mus_[k]) / sigmas_[k]);
    acc += std::exp(-0.5 * z * z) / (sigmas_[k] * std::sqrt(2.0 * std::numbers::pi) * std::max(b - a, 1e-300));
  }
  return w * acc;
}

std::size_t ParzenDensity::grid_index(const ParamValue& value) const {
  if (space_ == Space::counts) {
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      if (grid_[i] == value) return i;
    }
    throw SpecError(spec_.name + ": value " + to_string(value) + " is not a declared choice");
  }
  const double v = as_number(value);
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid_.size(); ++i) {
    if (std::abs(as_number(grid_[i]) - v) < std::abs(as_number(grid_[best]) - v)) best = i;
  }
  return best;
}

double ParzenDensity::log_density(const ParamValue& value) const {
  if (!masses_.empty()) return safe_log(masses_[grid_index(value)]);
  return safe_log(mixture_pdf(to_kernel(as_number(value))));
}

ParamValue ParzenDensity::sample(Rng& rng) const {
  if (space_ == Space::counts) {
    double u = rng.uniform();
    for (std::size_t i = 0; i < masses_.size(); ++i) {
      if (u < masses_[i]) return grid_[i];
      u -= masses_[i];
    }
    return grid_.back();
  }
  const std::size_t c = rng.below(mus_.size() + 1);
  double x;
  if (c == mus_.size()) {
    x = rng.uniform(lo_, hi_);
  } else {
    x = std::numeric_limits<double>::quiet_NaN();
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double y = rng.normal(mus_[c], sigmas_[c]);
      if (y >= lo_ && y <= hi_) {
        x = y;
        break;
      }
    }
    if (std::isnan(x)) x = std::clamp(mus_[c], lo_, hi_);
  }
  if (!grid_.empty()) {
    auto it = std::upper_bound(cell_edges_.begin() + 1, cell_edges_.end() - 1, x);
    return grid_[static_cast<std::size_t>(it - (cell_edges_.begin() + 1))];
  }
  double v = std::clamp(space_ == Space::log_value ? std::exp(x) : x, spec_.min, spec_.max);
  if (spec_.kind == ParamKind::int_range) return static_cast<std::int64_t>(std::llround(v));
  return v;
}

TpeModel::TpeModel(const SearchSpace& space, const std::vector<Observation>& obs, double gamma) : space_(space) {
  const auto split = split_observations(obs, gamma);
  for (const auto& spec : space_.specs()) {
    auto values_of = [&](const std::vector<std::size_t>& idx) {
      std::vector<ParamValue> out;
      for (auto i : idx) {
        auto it = obs[i].config.find(spec.name);
        if (it != obs[i].config.end()) out.push_back(it->second);
      }
      return out;
    };
    densities_.emplace_back(ParzenDensity(spec, values_of(split.good)), ParzenDensity(spec, values_of(split.bad)));
  }
}

double TpeModel::log_ratio(const std::string& param, const ParamValue& value) const {
  const auto& specs = space_.specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == param) {
      return densities_[i].first.log_density(value) - densities_[i].second.log_density(value);
    }
  }
  throw SpecError("parameter '" + param + "' is not in the tuning space");
}

double TpeModel::log_ratio(const Assignment& config) const {
  double total = 0.0;
  for (const auto& [name, value] : config) total += log_ratio(name, value);
  return total;
}

Assignment TpeModel::sample_good(Rng& rng) const {
  Assignment out;
  const auto& specs = space_.specs();
  for (std::size_t i = 0; i < specs.size(); ++i) out[specs[i].name] = densities_[i].first.sample(rng);
  return out;
}

Assignment suggest(const std::vector<Observation>& obs, const SearchSpace& space, const TpeParams& params,
                   Rng& rng) {
  params.check();
  if (obs.size() < std::max<std::size_t>(params.n_startup, 2)) return sample(space, rng);
  TpeModel model(space, obs, params.gamma);
  Assignment best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < params.n_candidates; ++c) {
    auto candidate = model.sample_good(rng);
    const double score = model.log_ratio(candidate);
    if (c == 0 || score > best_score) {
      best_score = score;
      best = std::move(candidate);
    }
  }
  return best;
}

SearchResult run_tuning(const SearchSpace& space, const TrialEvaluator& evaluate, const TuneOptions& options,
                        const RunOptions& run) {
  options.tpe.check();
  if (options.n_trials == 0) throw ConfigError("n_trials must be positive");
  SearchResult result;
  result.ledger.phase = "tune";
  result.ledger.seed = options.seed;
  result.ledger.space_fingerprint = space.fingerprint();
  if (run.resume && (run.resume->space_fingerprint != result.ledger.space_fingerprint ||
                     run.resume->seed != options.seed || run.resume->phase != "tune")) {
    throw StalenessError("existing tuning ledger was produced with a different space, seed or phase");
  }
  const std::uint64_t suggest_seed = mix_seed(options.seed, ~std::uint64_t{1});
  std::vector<Observation> obs;
  for (std::size_t id = 0; id < options.n_trials; ++id) {
    Rng rng(mix_seed(suggest_seed, id));
    auto config = suggest(obs, space, options.tpe, rng);
    TrialRecord record;
    if (run.resume && id < run.resume->records.size() &&
        canonical_key(run.resume->records[id].config) == canonical_key(config)) {
      record = run.resume->records[id];
    } else {
      record = run_trial(id, config, evaluate, options.seed);
      if (run.on_trial) run.on_trial(record);
    }
    if (record.status == TrialStatus::completed && !record.per_epoch.empty()) {
      const double fitness =
          options.selection == SelectionMetric::f1 ? record.best_f1 : std::exp(-record.best_loss);
      obs.push_back({record.config, fitness});
    }
    result.ledger.records.push_back(std::move(record));
  }
  result.best = select_best(result.ledger.records, options.selection);
  return result;
}

TrialEvaluator ffnn_hyper_evaluator(const ArchitectureConfig& arch, const TabularDataset& train,
                                    const TabularDataset& valid, const TrainOptions& options) {
  return [arch, &train, &valid, options](const Assignment& config, Rng& rng) {
    const auto hyper = hyper_from(config);
    auto model = build_ffnn(arch, train.input_dim, arch.use_tags ? train.n_tags() : 0, rng);
    return train_epochs(model, train, valid, hyper, options, rng);
  };
}

}  // namespace malnas

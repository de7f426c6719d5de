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

#include "malnas/nas.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "malnas/error.hpp"

namespace malnas {

using nlohmann::json;

std::string_view to_string(TrialStatus status) {
  return status == TrialStatus::completed ? "completed" : "failed";
}

std::string_view to_string(SelectionMetric metric) { return metric == SelectionMetric::f1 ? "f1" : "loss"; }

SelectionMetric parse_selection_metric(std::string_view name) {
  if (name == "f1") return SelectionMetric::f1;
  if (name == "loss") return SelectionMetric::loss;
  throw ConfigError("unknown selection metric '" + std::string(name) + "' (expected f1 or loss)");
}

void summarize(TrialRecord& record) {
  record.best_f1 = 0.0;
  record.best_epoch = 0;
  record.best_loss = std::numeric_limits<double>::infinity();
  for (const auto& m : record.per_epoch) {
    if (record.best_epoch == 0 || m.val_f1 > record.best_f1) {
      record.best_f1 = m.val_f1;
      record.best_epoch = m.epoch;
    }
    record.best_loss = std::min(record.best_loss, m.val_loss);
  }
}

namespace {

json epoch_to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"train_loss", m.train_loss},
          {"val_loss", m.val_loss},
          {"val_f1", m.val_f1},
          {"val_accuracy", m.val_accuracy}};
}

EpochMetrics epoch_from_json(const json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<std::size_t>();
  m.train_loss = j.value("train_loss", 0.0);
  m.val_loss = j.at("val_loss").get<double>();
  m.val_f1 = j.at("val_f1").get<double>();
  m.val_accuracy = j.value("val_accuracy", 0.0);
  return m;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    if (!line.empty() && line.find_first_not_of(" \t\r") != std::string_view::npos) lines.push_back(line);
    pos = end + 1;
  }
  return lines;
}

}  // namespace

std::string ledger_to_jsonl(const TrialLedger& ledger) {
  std::string out;
  json header = {{"record", "header"},
                 {"schema_version", kLedgerSchemaVersion},
                 {"phase", ledger.phase},
                 {"seed", ledger.seed},
                 {"space_fingerprint", ledger.space_fingerprint}};
  out += header.dump() + "\n";
  for (const auto& r : ledger.records) {
    json epochs = json::array();
    for (const auto& m : r.per_epoch) epochs.push_back(epoch_to_json(m));
    json line = {{"record", "trial"},
                 {"trial_id", r.trial_id},
                 {"config", to_json(r.config)},
                 {"per_epoch", epochs},
                 {"best_f1", r.best_f1},
                 {"best_epoch", r.best_epoch},
                 {"status", to_string(r.status)}};
    if (!r.error.empty()) line["error"] = r.error;
    out += line.dump() + "\n";
  }
  return out;
}

TrialLedger parse_ledger_jsonl(std::string_view text, const SearchSpace* space) {
  auto lines = split_lines(text);
  if (lines.empty()) throw SchemaError("ledger is empty");
  TrialLedger ledger;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw ParseError(std::string("ledger line is not JSON: ") + e.what(), i + 1);
    }
    try {
      const auto kind = j.at("record").get<std::string>();
      if (i == 0) {
        if (kind != "header") throw SchemaError("ledger must start with a header record");
        if (j.at("schema_version").get<int>() != kLedgerSchemaVersion) {
          throw SchemaError("unsupported ledger schema_version " + j.at("schema_version").dump());
        }
        ledger.phase = j.at("phase").get<std::string>();
        ledger.seed = j.at("seed").get<std::uint64_t>();
        ledger.space_fingerprint = j.at("space_fingerprint").get<std::string>();
        continue;
      }
      if (kind != "trial") throw SchemaError("unexpected ledger record '" + kind + "'");
      TrialRecord r;
      r.trial_id = j.at("trial_id").get<std::size_t>();
      if (r.trial_id != ledger.records.size()) throw SchemaError("ledger trial ids must be dense and ordered");
      r.config = assignment_from_json(j.at("config"), space);
      for (const auto& e : j.at("per_epoch")) r.per_epoch.push_back(epoch_from_json(e));
      const auto status = j.at("status").get<std::string>();
      if (status == "completed") {
        r.status = TrialStatus::completed;
      } else if (status == "failed") {
        r.status = TrialStatus::failed;
      } else {
        throw SchemaError("unknown trial status '" + status + "'");
      }
      r.error = j.value("error", std::string());
      summarize(r);
      ledger.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed ledger record: ") + e.what(), i + 1);
    }
  }
  return ledger;
}

std::string timing_to_jsonl(const TrialLedger& ledger) {
  std::string out;
  for (const auto& r : ledger.records) {
    out += json{{"trial_id", r.trial_id}, {"wall_time", r.wall_time}}.dump() + "\n";
  }
  return out;
}

std::uint64_t trial_seed(std::uint64_t seed, std::size_t trial_id) { return mix_seed(seed, trial_id); }

std::vector<Assignment> sample_distinct(const SearchSpace& space, std::size_t n, std::uint64_t seed) {
  bool discrete = true;
  for (const auto& s : space.specs()) discrete = discrete && s.is_discrete();
  if (discrete) {
    const auto card = grid_cardinality(space);
    if (n > card) {
      throw InfeasibleError("requested " + std::to_string(n) + " distinct trials but the space has only " +
                            std::to_string(card) + " configurations");
    }
  }
  Rng rng(seed);
  std::set<std::string> seen;
  std::vector<Assignment> out;
  out.reserve(n);
  // Rejection sampling slows down as the grid fills; the bound only guards
  // against pathological spaces.
  const std::size_t max_draws = 1000 * n + 100000;
  std::size_t draws = 0;
  while (out.size() < n) {
    if (++draws > max_draws) throw InfeasibleError("could not draw enough distinct configurations");
    auto config = sample(space, rng);
    if (seen.insert(canonical_key(config)).second) out.push_back(std::move(config));
  }
  return out;
}

TrialRecord run_trial(std::size_t trial_id, const Assignment& config, const TrialEvaluator& evaluate,
                      std::uint64_t seed) {
  TrialRecord r;
  r.trial_id = trial_id;
  r.config = config;
  Rng rng(trial_seed(seed, trial_id));
  const auto start = std::chrono::steady_clock::now();
  try {
    r.per_epoch = evaluate(r.config, rng);
    r.status = TrialStatus::completed;
  } catch (const Error& e) {
    r.status = TrialStatus::failed;
    r.error = e.what();
  }
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  summarize(r);
  return r;
}

std::vector<TrialRecord> run_trials(const std::vector<Assignment>& configs, const TrialEvaluator& evaluate,
                                    std::uint64_t seed, const RunOptions& options) {
  std::vector<TrialRecord> records(configs.size());
  std::vector<bool> done(configs.size(), false);
  if (options.resume) {
    for (const auto& prior : options.resume->records) {
      if (prior.trial_id < configs.size() &&
          canonical_key(prior.config) == canonical_key(configs[prior.trial_id])) {
        records[prior.trial_id] = prior;
        done[prior.trial_id] = true;
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  std::exception_ptr failure;
  auto worker = [&]() {
    for (;;) {
      const std::size_t id = next.fetch_add(1);
      if (id >= configs.size()) return;
      if (done[id]) continue;
      try {
        auto r = run_trial(id, configs[id], evaluate, seed);
        records[id] = std::move(r);
        if (options.on_trial) {
          std::lock_guard lock(callback_mutex);
          options.on_trial(records[id]);
        }
      } catch (...) {
        // Anything escaping run_trial (a callback, an allocation) stops the pool.
        std::lock_guard lock(callback_mutex);
        if (!failure) failure = std::current_exception();
        next.store(configs.size());
        return;
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, configs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

std::optional<std::size_t> select_best(const std::vector<TrialRecord>& records, SelectionMetric metric) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.status != TrialStatus::completed || r.per_epoch.empty()) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = records[*best];
    const bool better = metric == SelectionMetric::f1 ? r.best_f1 > b.best_f1 : r.best_loss < b.best_loss;
    const bool tie = metric == SelectionMetric::f1 ? r.best_f1 == b.best_f1 : r.best_loss == b.best_loss;
    if (better || (tie && r.trial_id < b.trial_id)) best = i;
  }
  return best;
}

SearchResult run_nas(const SearchSpace& space, const TrialEvaluator& evaluate, const NasOptions& options,
                     const RunOptions& run) {
  if (options.n_trials == 0) throw ConfigError("n_trials must be positive");
  SearchResult result;
  result.ledger.phase = "nas";
  result.ledger.seed = options.seed;
  result.ledger.space_fingerprint = space.fingerprint();
  if (run.resume && (run.resume->space_fingerprint != result.ledger.space_fingerprint ||
                     run.resume->seed != options.seed || run.resume->phase != "nas")) {
    throw StalenessError("existing NAS ledger was produced with a different space, seed or phase");
  }
  // Sampling uses its own stream so configs do not depend on trial outcomes.
  auto configs = sample_distinct(space, options.n_trials, mix_seed(options.seed, ~std::uint64_t{0}));
  RunOptions opts = run;
  opts.workers = options.workers;
  result.ledger.records = run_trials(configs, evaluate, options.seed, opts);
  result.best = select_best(result.ledger.records);
  return result;
}

TrialEvaluator ffnn_architecture_evaluator(const TabularDataset& train, const TabularDataset& valid,
                                           const HyperConfig& hyper, const TrainOptions& options) {
  return [&train, &valid, hyper, options](const Assignment& config, Rng& rng) {
    const auto arch = architecture_from(config);
    auto model = build_ffnn(arch, train.input_dim, arch.use_tags ? train.n_tags() : 0, rng);
    return train_epochs(model, train, valid, hyper, options, rng);
  };
}

std::vector<TrajectoryPoint> top_k_trajectory(const std::vector<TrialRecord>& records, std::size_t k) {
  std::vector<const TrialRecord*> completed;
  std::size_t max_epochs = 0;
  for (const auto& r : records) {
    if (r.status != TrialStatus::completed || r.per_epoch.empty()) continue;
    completed.push_back(&r);
    max_epochs = std::max(max_epochs, r.per_epoch.size());
  }
  std::vector<TrajectoryPoint> out;
  if (completed.empty()) return out;
  k = std::clamp<std::size_t>(k, 1, completed.size());

  // best_so_far[t][e] = max F1 over the first e+1 epochs of trial t.
  std::vector<std::vector<double>> best_so_far(completed.size());
  for (std::size_t t = 0; t < completed.size(); ++t) {
    double running = -std::numeric_limits<double>::infinity();
    for (const auto& m : completed[t]->per_epoch) {
      running = std::max(running, m.val_f1);
      best_so_far[t].push_back(running);
    }
  }

  std::vector<std::size_t> order(completed.size());
  for (std::size_t e = 0; e < max_epochs; ++e) {
    auto stat = [&](std::size_t t) { return best_so_far[t][std::min(e, best_so_far[t].size() - 1)]; };
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (stat(a) != stat(b)) return stat(a) > stat(b);
      return completed[a]->trial_id < completed[b]->trial_id;
    });
    TrajectoryPoint p;
    p.epoch = e + 1;
    for (std::size_t i = 0; i < k; ++i) {
      p.mean_best_f1 += stat(order[i]);
      p.mean_complexity += complexity(architecture_from(completed[order[i]]->config));
    }
    p.mean_best_f1 /= static_cast<double>(k);
    p.mean_complexity /= static_cast<double>(k);
    out.push_back(p);
  }
  return out;
}

json to_json(const std::vector<TrajectoryPoint>& trajectory) {
  json out = json::array();
  for (const auto& p : trajectory) {
    out.push_back({{"epoch", p.epoch}, {"mean_best_f1", p.mean_best_f1}, {"mean_complexity", p.mean_complexity}});
  }
  return out;
}

}  // namespace malnas

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
#include "malnas/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <set>
#include <sstream>

#include "malnas/checkpoint.hpp"
#include "malnas/data.hpp"
#include "malnas/error.hpp"
#include "malnas/io.hpp"
#include "malnas/rng.hpp"

namespace malnas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Artifact names double as manifest keys.
constexpr const char* kNasLedger = "nas_ledger.jsonl";
constexpr const char* kNasTiming = "nas_ledger.timing.jsonl";
constexpr const char* kNasTrajectory = "nas_trajectory.json";
constexpr const char* kTuneLedger = "tune_ledger.jsonl";
constexpr const char* kTuneTiming = "tune_ledger.timing.jsonl";
constexpr const char* kImages = "images.bin";
constexpr const char* kAlphas = "darts_alphas.json";
constexpr const char* kGenotype = "genotype.txt";
constexpr const char* kSearchHistory = "darts_search.json";
constexpr const char* kModel = "model.ckpt";
constexpr const char* kTrainHistory = "train_history.json";
constexpr const char* kEvalReport = "eval_report.json";
constexpr const char* kRoc = "roc.csv";
constexpr const char* kReport = "report.txt";
constexpr const char* kTrajectoryCsv = "trajectory.csv";

// Independent random streams per phase.
constexpr std::uint64_t kTrainStream = 0x7472'6169'6eULL;
constexpr std::uint64_t kSearchStream = 0x6461'7274'73ULL;
constexpr std::uint64_t kSubsampleStream = 0x7375'6273ULL;

void log_line(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

// ---------------------------------------------------------------------------
// Config parsing helpers
// ---------------------------------------------------------------------------

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

void read_count(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!non_negative_integer(j[key])) throw ConfigError(where + "." + key + " must be a non-negative integer");
  out = j[key].get<std::size_t>();
}

void read_u64(const json& j, const char* key, std::uint64_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!non_negative_integer(j[key])) throw ConfigError(where + "." + key + " must be a non-negative integer");
  out = j[key].get<std::uint64_t>();
}

void read_real(const json& j, const char* key, double& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j[key].is_number()) throw ConfigError(where + "." + key + " must be a number");
  out = j[key].get<double>();
}

std::string read_string(const json& j, const char* key, const std::string& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_string()) throw ConfigError(where + "." + key + " must be a string");
  return j[key].get<std::string>();
}

const json& section(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j[key] : empty;
}

// Library validation errors inside a config are config errors.
template <class F>
auto as_config_error(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

json hyper_json(const HyperConfig& h) {
  return {{"batch_size", h.batch_size},
          {"learning_rate", h.learning_rate},
          {"dropout", h.dropout},
          {"tag_loss_weight", h.tag_loss_weight},
          {"count_loss_weight", h.count_loss_weight}};
}

HyperConfig parse_hyper(const json& j) {
  check_keys(j, {"batch_size", "learning_rate", "dropout", "tag_loss_weight", "count_loss_weight"}, "nas.hyper");
  HyperConfig h;
  std::size_t batch = static_cast<std::size_t>(h.batch_size);
  read_count(j, "batch_size", batch, "nas.hyper");
  if (batch == 0) throw ConfigError("nas.hyper.batch_size must be positive");
  h.batch_size = static_cast<int>(batch);
  read_real(j, "learning_rate", h.learning_rate, "nas.hyper");
  read_real(j, "dropout", h.dropout, "nas.hyper");
  read_real(j, "tag_loss_weight", h.tag_loss_weight, "nas.hyper");
  read_real(j, "count_loss_weight", h.count_loss_weight, "nas.hyper");
  if (!(h.learning_rate > 0.0)) throw ConfigError("nas.hyper.learning_rate must be positive");
  if (h.dropout < 0.0 || h.dropout >= 1.0) throw ConfigError("nas.hyper.dropout must lie in [0, 1)");
  if (h.tag_loss_weight < 0.0 || h.count_loss_weight < 0.0) throw ConfigError("nas.hyper loss weights must be >= 0");
  return h;
}

void parse_static_phases(const json& j, PipelineConfig& cfg) {
  auto& p = cfg.static_phases;

  const auto& nas = section(j, "nas");
  check_keys(nas, {"space", "trials", "epochs", "hyper"}, "nas");
  p.nas_space = as_config_error("nas.space", [&] {
    return search_space_from_json(nas.contains("space") ? nas["space"] : json("sorel-architecture"));
  });
  read_count(nas, "trials", p.nas_trials, "nas");
  read_count(nas, "epochs", p.nas_epochs, "nas");
  p.nas_hyper = parse_hyper(section(nas, "hyper"));
  if (p.nas_trials == 0) throw ConfigError("nas.trials must be positive");

  const auto& tune = section(j, "tune");
  check_keys(tune, {"space", "trials", "epochs", "tpe", "selection"}, "tune");
  p.tune_space = as_config_error("tune.space", [&] {
    return search_space_from_json(tune.contains("space") ? tune["space"] : json("sorel-hyper"));
  });
  read_count(tune, "trials", p.tune_trials, "tune");
  read_count(tune, "epochs", p.tune_epochs, "tune");
  if (p.tune_trials == 0) throw ConfigError("tune.trials must be positive");
  const auto& tpe = section(tune, "tpe");
  check_keys(tpe, {"gamma", "n_startup", "n_candidates"}, "tune.tpe");
  read_real(tpe, "gamma", p.tpe.gamma, "tune.tpe");
  read_count(tpe, "n_startup", p.tpe.n_startup, "tune.tpe");
  read_count(tpe, "n_candidates", p.tpe.n_candidates, "tune.tpe");
  as_config_error("tune.tpe", [&] {
    p.tpe.check();
    return 0;
  });
  p.selection = as_config_error("tune.selection", [&] {
    return parse_selection_metric(read_string(tune, "selection", "f1", "tune"));
  });

  const auto& train = section(j, "train");
  check_keys(train, {"epochs", "count_loss"}, "train");
  read_count(train, "epochs", p.final_epochs, "train");
  p.count_loss = as_config_error("train.count_loss", [&] {
    return parse_count_loss(read_string(train, "count_loss", "mse_log1p", "train"));
  });

  cfg.canonical["nas"] = {{"space", to_json(p.nas_space)},
                          {"trials", p.nas_trials},
                          {"epochs", p.nas_epochs},
                          {"hyper", hyper_json(p.nas_hyper)}};
  cfg.canonical["tune"] = {{"space", to_json(p.tune_space)},
                           {"trials", p.tune_trials},
                           {"epochs", p.tune_epochs},
                           {"tpe", {{"gamma", p.tpe.gamma}, {"n_startup", p.tpe.n_startup},
                                    {"n_candidates", p.tpe.n_candidates}}},
                           {"selection", std::string(to_string(p.selection))}};
  cfg.canonical["train"] = {{"epochs", p.final_epochs}, {"count_loss", std::string(to_string(p.count_loss))}};
}

void parse_online_phases(const json& j, PipelineConfig& cfg) {
  auto& p = cfg.online_phases;

  const auto& nas = section(j, "nas");
  check_keys(nas,
             {"network", "subsample", "epochs", "batch_size", "dropout", "weight_lr_max", "weight_lr_min",
              "weight_momentum", "weight_decay", "grad_clip", "alpha_lr", "alpha_weight_decay", "alpha_beta1",
              "alpha_beta2"},
             "nas");
  p.network = as_config_error("nas.network", [&] {
    auto net = cell_net_config_from_json(section(nas, "network"));
    net.check();
    return net;
  });
  read_count(nas, "subsample", p.search_subsample, "nas");
  auto& s = p.search;
  read_count(nas, "epochs", s.epochs, "nas");
  read_count(nas, "batch_size", s.batch_size, "nas");
  read_real(nas, "dropout", s.dropout, "nas");
  read_real(nas, "weight_lr_max", s.weight_lr_max, "nas");
  read_real(nas, "weight_lr_min", s.weight_lr_min, "nas");
  read_real(nas, "weight_momentum", s.weight_momentum, "nas");
  read_real(nas, "weight_decay", s.weight_decay, "nas");
  read_real(nas, "grad_clip", s.grad_clip, "nas");
  read_real(nas, "alpha_lr", s.alpha_lr, "nas");
  read_real(nas, "alpha_weight_decay", s.alpha_weight_decay, "nas");
  read_real(nas, "alpha_beta1", s.alpha_beta1, "nas");
  read_real(nas, "alpha_beta2", s.alpha_beta2, "nas");
  if (s.batch_size == 0) throw ConfigError("nas.batch_size must be positive");
  if (s.dropout < 0.0 || s.dropout >= 1.0) throw ConfigError("nas.dropout must lie in [0, 1)");

  if (j.contains("tune")) throw ConfigError("online-darts pipelines have no tune phase");

  const auto& train = section(j, "train");
  check_keys(train, {"epochs", "learning_rate", "batch_size", "dropout"}, "train");
  auto& f = p.final;
  read_count(train, "epochs", f.epochs, "train");
  read_real(train, "learning_rate", f.learning_rate, "train");
  read_count(train, "batch_size", f.batch_size, "train");
  read_real(train, "dropout", f.dropout, "train");
  if (f.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(f.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
  if (f.dropout < 0.0 || f.dropout >= 1.0) throw ConfigError("train.dropout must lie in [0, 1)");

  cfg.canonical["nas"] = {{"network", to_json(p.network)},
                          {"subsample", p.search_subsample},
                          {"epochs", s.epochs},
                          {"batch_size", s.batch_size},
                          {"dropout", s.dropout},
                          {"weight_lr_max", s.weight_lr_max},
                          {"weight_lr_min", s.weight_lr_min},
                          {"weight_momentum", s.weight_momentum},
                          {"weight_decay", s.weight_decay},
                          {"grad_clip", s.grad_clip},
                          {"alpha_lr", s.alpha_lr},
                          {"alpha_weight_decay", s.alpha_weight_decay},
                          {"alpha_beta1", s.alpha_beta1},
                          {"alpha_beta2", s.alpha_beta2}};
  cfg.canonical["train"] = {{"epochs", f.epochs},
                            {"learning_rate", f.learning_rate},
                            {"batch_size", f.batch_size},
                            {"dropout", f.dropout}};
}

// ---------------------------------------------------------------------------
// Manifest and artifact helpers
// ---------------------------------------------------------------------------

std::string dump(const json& j) { return j.dump(2) + "\n"; }

class Run {
 public:
  Run(const PipelineConfig& config, bool create) : config_(config) {
    if (config.output_dir.empty()) throw ConfigError("output directory is not set");
    auto existing = read_manifest(config.output_dir);
    if (existing) {
      if (existing->config_hash != config.hash()) {
        throw StalenessError("output directory " + config.output_dir.string() +
                             " holds a run of a different config (hash " + existing->config_hash + ")");
      }
      manifest_ = std::move(*existing);
      return;
    }
    if (!create) throw DependencyError("no run manifest in " + config.output_dir.string() + "; run the nas phase first");
    fs::create_directories(config.output_dir);
    manifest_.kind = std::string(to_string(config.kind));
    manifest_.config_hash = config.hash();
    save();
  }

  RunManifest& manifest() { return manifest_; }
  fs::path path(const std::string& name) const { return config_.output_dir / name; }

  // Path of a recorded upstream artifact after checking its content hash.
  fs::path require(const std::string& name, const std::string& phase) const {
    const auto it = manifest_.artifacts.find(name);
    if (it == manifest_.artifacts.end()) {
      throw DependencyError("missing " + name + "; run the " + phase + " phase first");
    }
    const auto p = config_.output_dir / it->second.path;
    if (!fs::exists(p)) throw DependencyError("artifact " + p.string() + " listed in the manifest is missing");
    if (file_sha256(p) != it->second.sha256) {
      throw StalenessError("artifact " + p.string() + " changed since it was recorded");
    }
    return p;
  }

  void write(const std::string& name, std::string_view bytes) {
    write_file_atomic(path(name), bytes);
    manifest_.artifacts[name] = ManifestEntry{name, sha256_hex(bytes)};
  }

  void record_existing(const std::string& name) {
    manifest_.artifacts[name] = ManifestEntry{name, file_sha256(path(name))};
  }

  void save() const { write_file_atomic(config_.output_dir / kManifestFile, dump(to_json(manifest_))); }

 private:
  const PipelineConfig& config_;
  RunManifest manifest_;
};

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Wall-clock data lives next to the manifest so the manifest stays
// reproducible byte for byte.
void record_timing(const fs::path& output_dir, const std::string& phase, double seconds) {
  const auto p = output_dir / kTimingsFile;
  json t = json::object();
  if (fs::exists(p)) {
    try {
      t = json::parse(read_file(p));
    } catch (const json::exception&) {
      t = json::object();
    }
  }
  t[phase] = {{"seconds", seconds}, {"finished_utc", utc_now()}};
  write_file_atomic(p, dump(t));
}

class PhaseTimer {
 public:
  PhaseTimer(const fs::path& output_dir, std::string phase)
      : dir_(output_dir), phase_(std::move(phase)), start_(std::chrono::steady_clock::now()) {}
  void done() const {
    record_timing(dir_, phase_, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
  }

 private:
  fs::path dir_;
  std::string phase_;
  std::chrono::steady_clock::time_point start_;
};

// Rewrites the ledger file with the longest completed prefix of trials, so
// a crash leaves a resumable ledger behind.
class LedgerWriter {
 public:
  LedgerWriter(fs::path path, std::string phase, std::uint64_t seed, std::string fingerprint, std::size_t n)
      : path_(std::move(path)), slots_(n) {
    ledger_.phase = std::move(phase);
    ledger_.seed = seed;
    ledger_.space_fingerprint = std::move(fingerprint);
  }

  void add(const TrialRecord& record) {
    if (record.trial_id >= slots_.size()) return;
    slots_[record.trial_id] = record;
    std::size_t prefix = 0;
    while (prefix < slots_.size() && slots_[prefix]) ++prefix;
    if (prefix == written_) return;
    ledger_.records.clear();
    for (std::size_t i = 0; i < prefix; ++i) ledger_.records.push_back(*slots_[i]);
    write_file_atomic(path_, ledger_to_jsonl(ledger_));
    written_ = prefix;
  }

 private:
  fs::path path_;
  TrialLedger ledger_;
  std::vector<std::optional<TrialRecord>> slots_;
  std::size_t written_ = 0;
};

std::optional<TrialLedger> existing_ledger(const fs::path& path, const SearchSpace& space) {
  if (!fs::exists(path)) return std::nullopt;
  return parse_ledger_jsonl(read_file(path), &space);
}

// ---------------------------------------------------------------------------
// Static data
// ---------------------------------------------------------------------------

struct StaticData {
  TabularDataset train;
  TabularDataset valid;
  TabularDataset test;
  FeatureStats stats;
};

StaticData load_static(const PipelineConfig& config) {
  auto pool = load_tabular(config.data.at("train"));
  auto test = load_tabular(config.data.at("test"));
  if (test.input_dim != pool.input_dim) {
    throw SchemaError("test features have width " + std::to_string(test.input_dim) + ", training features " +
                      std::to_string(pool.input_dim));
  }
  if (test.tag_names != pool.tag_names) throw SchemaError("test and training files declare different tags");
  if (test.has_counts != pool.has_counts) throw SchemaError("test and training files disagree on vendor counts");
  auto split = split_static(pool);
  StaticData d{std::move(split.train), std::move(split.valid), std::move(test), {}};
  std::array<TabularDataset*, 2> others{&d.valid, &d.test};
  d.stats = normalize(d.train, others);
  return d;
}

TrialLedger read_ledger_artifact(const Run& run, const char* name, const char* phase, const SearchSpace& space) {
  return parse_ledger_jsonl(read_file(run.require(name, phase)), &space);
}

ArchitectureConfig chosen_architecture(const Run& run, const PipelineConfig& config) {
  const auto ledger = read_ledger_artifact(run, kNasLedger, "nas", config.static_phases.nas_space);
  const auto best = select_best(ledger.records);
  if (!best) throw Error("every NAS trial failed; no architecture to use");
  return architecture_from(ledger.records[*best].config);
}

HyperConfig chosen_hyper(const Run& run, const PipelineConfig& config, const ArchitectureConfig& arch) {
  const auto space = tuning_space_for(arch, config.static_phases.tune_space);
  const auto ledger = read_ledger_artifact(run, kTuneLedger, "tune", space);
  const auto best = select_best(ledger.records, config.static_phases.selection);
  if (!best) throw Error("every tuning trial failed; no hyperparameters to use");
  return hyper_from(ledger.records[*best].config, config.static_phases.nas_hyper);
}

json history_json(const std::vector<EpochMetrics>& history) {
  json out = json::array();
  for (const auto& m : history) {
    out.push_back({{"epoch", m.epoch},
                   {"train_loss", m.train_loss},
                   {"val_loss", m.val_loss},
                   {"val_f1", m.val_f1},
                   {"val_accuracy", m.val_accuracy}});
  }
  return out;
}

void static_nas(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto& p = config.static_phases;
  const auto data = load_static(config);
  TrainOptions topts;
  topts.epochs = p.nas_epochs;
  topts.count_loss = p.count_loss;
  const auto evaluate = ffnn_architecture_evaluator(data.train, data.valid, p.nas_hyper, topts);

  const auto resume = existing_ledger(run.path(kNasLedger), p.nas_space);
  NasOptions opts{p.nas_trials, p.nas_epochs, config.seed, config.workers};
  LedgerWriter writer(run.path(kNasLedger), "nas", config.seed, p.nas_space.fingerprint(), p.nas_trials);
  RunOptions ropts;
  ropts.resume = resume ? &*resume : nullptr;
  ropts.on_trial = [&](const TrialRecord& r) {
    writer.add(r);
    log_line(log, "nas trial " + std::to_string(r.trial_id + 1) + "/" + std::to_string(p.nas_trials) + " " +
                      std::string(to_string(r.status)) + " best_f1=" + format_double(r.best_f1));
  };
  const auto result = run_nas(p.nas_space, evaluate, opts, ropts);
  if (!result.best) throw Error("every NAS trial failed; no architecture to use");

  run.write(kNasLedger, ledger_to_jsonl(result.ledger));
  write_file_atomic(run.path(kNasTiming), timing_to_jsonl(result.ledger));
  run.write(kNasTrajectory, dump(to_json(top_k_trajectory(result.ledger.records, 30))));
  run.manifest().chosen["architecture"] = to_json(result.ledger.records[*result.best].config);
  run.manifest().chosen["nas_trial"] = *result.best;
  run.save();
}

void static_tune(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto& p = config.static_phases;
  const auto arch = chosen_architecture(run, config);
  const auto space = tuning_space_for(arch, p.tune_space);
  const auto data = load_static(config);
  TrainOptions topts;
  topts.epochs = p.tune_epochs;
  topts.count_loss = p.count_loss;
  const auto evaluate = ffnn_hyper_evaluator(arch, data.train, data.valid, topts);

  const auto resume = existing_ledger(run.path(kTuneLedger), space);
  TuneOptions opts{p.tune_trials, p.tune_epochs, config.seed, p.tpe, p.selection};
  LedgerWriter writer(run.path(kTuneLedger), "tune", config.seed, space.fingerprint(), p.tune_trials);
  RunOptions ropts;
  ropts.resume = resume ? &*resume : nullptr;
  ropts.on_trial = [&](const TrialRecord& r) {
    writer.add(r);
    log_line(log, "tune trial " + std::to_string(r.trial_id + 1) + "/" + std::to_string(p.tune_trials) + " " +
                      std::string(to_string(r.status)) + " best_f1=" + format_double(r.best_f1));
  };
  const auto result = run_tuning(space, evaluate, opts, ropts);
  if (!result.best) throw Error("every tuning trial failed; no hyperparameters to use");

  run.write(kTuneLedger, ledger_to_jsonl(result.ledger));
  write_file_atomic(run.path(kTuneTiming), timing_to_jsonl(result.ledger));
  run.manifest().chosen["hyper"] = to_json(result.ledger.records[*result.best].config);
  run.manifest().chosen["tune_trial"] = *result.best;
  run.save();
}

void static_train(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto& p = config.static_phases;
  const auto arch = chosen_architecture(run, config);
  const auto hyper = chosen_hyper(run, config, arch);
  const auto data = load_static(config);

  Rng rng(mix_seed(config.seed, kTrainStream));
  auto model = build_ffnn(arch, data.train.input_dim, arch.use_tags ? data.train.n_tags() : 0, rng);
  TrainOptions topts;
  topts.epochs = p.final_epochs;
  topts.count_loss = p.count_loss;

  std::vector<CheckpointArray> best_state = capture(model.parameters());
  double best_f1 = -1.0;
  std::size_t best_epoch = 0;
  const auto history = train_epochs(model, data.train, data.valid, hyper, topts, rng, [&](const EpochMetrics& m) {
    log_line(log, "train epoch " + std::to_string(m.epoch) + " val_loss=" + format_double(m.val_loss) +
                      " val_f1=" + format_double(m.val_f1));
    if (m.val_f1 > best_f1) {
      best_f1 = m.val_f1;
      best_epoch = m.epoch;
      best_state = capture(model.parameters());
    }
  });
  restore(model.parameters(), best_state);

  json extra = {{"feature_stats", to_json(data.stats)}, {"best_epoch", best_epoch}, {"config_hash", config.hash()}};
  run.write(kModel, encode_checkpoint(ffnn_checkpoint(model, hyper, extra)));
  run.write(kTrainHistory, dump({{"best_epoch", best_epoch}, {"history", history_json(history)}}));
  run.manifest().chosen["final_epoch"] = best_epoch;
  run.save();
}

EvalReport static_eval(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto ck = load_checkpoint(run.require(kModel, "train"));
  const auto model = ffnn_from_checkpoint(ck);
  const auto data = load_static(config);
  if (data.train.input_dim != model.input_dim()) throw SchemaError("checkpoint input width does not match the data");

  const auto valid_scores = predict_malicious(model, data.valid);
  const auto cal = calibrate_threshold(valid_scores, data.valid.labels, config.target_fpr);
  const auto test_scores = predict_malicious(model, data.test);
  auto report = evaluate(test_scores, data.test.labels, cal.threshold);
  log_line(log, "eval f1=" + format_double(report.f1) + " auc=" + format_double(report.auc) +
                    " tpr@1%fpr=" + format_double(report.tpr_at_fpr_0_01));

  run.write(kEvalReport, dump(to_json(report)));
  run.write(kRoc, roc_csv(roc_auc(test_scores, data.test.labels).curve));
  run.save();
  return report;
}

// ---------------------------------------------------------------------------
// Online data
// ---------------------------------------------------------------------------

ImageCorpus online_corpus(const PipelineConfig& config, Run& run, bool build, const LogFn& log) {
  if (config.data.contains("images")) return load_image_corpus(config.data.at("images"));
  if (!build) return load_image_corpus(run.require(kImages, "nas"));
  OnlineRaw raw;
  raw.snapshots = parse_snapshots_jsonl(read_file(config.data.at("snapshots")));
  raw.network = parse_network_jsonl(read_file(config.data.at("network")));
  std::vector<std::string> warnings;
  auto corpus = build_image_corpus(raw, config.split_seed, &warnings);
  for (const auto& w : warnings) log_line(log, "warning: " + w);
  run.write(kImages, encode_image_corpus(corpus));
  run.save();
  return corpus;
}

ImageSet images_of(const ImageCorpus& corpus, const std::vector<std::string>& experiments) {
  const std::set<std::string> keep(experiments.begin(), experiments.end());
  std::vector<ImageSample> picked;
  for (const auto& s : corpus.samples) {
    if (keep.contains(s.experiment)) picked.push_back(s);
  }
  if (picked.empty()) throw DataError("split has no images");
  return image_set_from(picked);
}

CellNetConfig network_for(const PipelineConfig& config) {
  auto net = config.online_phases.network;
  net.input_channels = 1;
  net.input_size = kImageSize;
  net.check();
  return net;
}

void online_nas(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto& p = config.online_phases;
  const auto corpus = online_corpus(config, run, true, log);
  const auto train = images_of(corpus, corpus.split.train);

  // Seeded subsample, then alternate rows between weight and alpha batches.
  std::vector<std::size_t> rows(train.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Rng sub_rng(mix_seed(config.seed, kSubsampleStream));
  sub_rng.shuffle(rows.begin(), rows.end());
  if (p.search_subsample > 0 && p.search_subsample < rows.size()) rows.resize(p.search_subsample);
  if (rows.size() < 2) throw DataError("search needs at least two training images");
  std::vector<std::size_t> w_rows, a_rows;
  for (std::size_t i = 0; i < rows.size(); ++i) (i % 2 == 0 ? w_rows : a_rows).push_back(rows[i]);
  const auto w_set = train.subset(w_rows);
  const auto a_set = train.subset(a_rows);

  Rng rng(mix_seed(config.seed, kSearchStream));
  auto supernet = CellNetwork::supernet(network_for(config), rng);
  auto alphas = init_alphas(config.online_phases.network.nodes, rng);
  const auto epochs = darts_search(supernet, alphas, w_set, a_set, p.search, rng);
  json hist = json::array();
  for (const auto& e : epochs) {
    log_line(log, "search epoch " + std::to_string(e.epoch) + " valid_loss=" + format_double(e.valid_loss) +
                      " valid_acc=" + format_double(e.valid_accuracy));
    hist.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"valid_loss", e.valid_loss},
                    {"valid_accuracy", e.valid_accuracy}});
  }
  const auto genotype = derive_genotype(alphas);
  run.write(kAlphas, dump(to_json(alphas)));
  run.write(kGenotype, genotype_to_text(genotype));
  run.write(kSearchHistory, dump(hist));
  run.manifest().chosen["genotype"] = genotype_to_text(genotype);
  run.save();
}

void online_train(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto genotype = genotype_from_text(read_file(run.require(kGenotype, "nas")));
  const auto corpus = online_corpus(config, run, false, log);
  const auto train = images_of(corpus, corpus.split.train);
  const auto valid = images_of(corpus, corpus.split.valid);

  Rng rng(mix_seed(config.seed, kTrainStream));
  auto net = CellNetwork::discrete(genotype, network_for(config), rng);
  const auto result = train_final(net, train, valid, config.online_phases.final, rng, [&](const EpochMetrics& m) {
    log_line(log, "train epoch " + std::to_string(m.epoch) + " val_loss=" + format_double(m.val_loss) +
                      " val_f1=" + format_double(m.val_f1));
  });
  json extra = {{"best_epoch", result.best_epoch}, {"config_hash", config.hash()}};
  run.write(kModel, encode_checkpoint(cell_network_checkpoint(net, extra)));
  run.write(kTrainHistory, dump({{"best_epoch", result.best_epoch}, {"history", history_json(result.history)}}));
  run.manifest().chosen["final_epoch"] = result.best_epoch;
  run.save();
}

EvalReport online_eval(const PipelineConfig& config, Run& run, const LogFn& log) {
  const auto net = cell_network_from_checkpoint(load_checkpoint(run.require(kModel, "train")));
  const auto corpus = online_corpus(config, run, false, log);
  const auto valid = images_of(corpus, corpus.split.valid);
  const auto valid_scores = predict_images(net, valid);
  const auto cal = calibrate_threshold(valid_scores, valid.labels, config.target_fpr);

  std::vector<ImageSample> test_samples;
  const std::set<std::string> test_ids(corpus.split.test.begin(), corpus.split.test.end());
  for (const auto& s : corpus.samples) {
    if (test_ids.contains(s.experiment)) test_samples.push_back(s);
  }
  if (test_samples.empty()) throw DataError("test split has no images");
  const auto test = image_set_from(test_samples);
  const auto scores = predict_images(net, test);

  std::map<std::string, ScoredTimeline> by_experiment;
  for (std::size_t i = 0; i < test_samples.size(); ++i) {
    auto& t = by_experiment[test_samples[i].experiment];
    t.experiment = test_samples[i].experiment;
    t.injection_time = kInjectionTime;
    t.instants.push_back({test_samples[i].timestamp, scores[i]});
  }
  std::vector<ScoredTimeline> timelines;
  for (auto& [id, t] : by_experiment) {
    std::sort(t.instants.begin(), t.instants.end(),
              [](const ScoredInstant& a, const ScoredInstant& b) { return a.timestamp < b.timestamp; });
    timelines.push_back(std::move(t));
  }

  auto report = evaluate(scores, test.labels, cal.threshold, timelines);
  log_line(log, "eval f1=" + format_double(report.f1) + " delay=" +
                    (report.delay_seconds ? format_double(*report.delay_seconds) : std::string("undefined")));
  run.write(kEvalReport, dump(to_json(report)));
  run.write(kRoc, roc_csv(roc_auc(scores, test.labels).curve));
  run.save();
  return report;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::string_view to_string(PipelineKind kind) {
  return kind == PipelineKind::static_ffnn ? "static-ffnn" : "online-darts";
}

PipelineKind parse_pipeline_kind(std::string_view name) {
  if (name == "static-ffnn") return PipelineKind::static_ffnn;
  if (name == "online-darts") return PipelineKind::online_darts;
  throw ConfigError("unknown pipeline kind '" + std::string(name) + "' (expected static-ffnn or online-darts)");
}

std::string PipelineConfig::hash() const { return sha256_hex(canonical.dump()); }

PipelineConfig parse_pipeline_config(const json& j, const fs::path& base_dir) {
  check_keys(j, {"kind", "seed", "split_seed", "workers", "output_dir", "data", "nas", "tune", "train", "eval"},
             "config");
  PipelineConfig cfg;
  if (!j.contains("kind")) throw ConfigError("config.kind is required");
  cfg.kind = parse_pipeline_kind(read_string(j, "kind", "", "config"));
  if (!j.contains("seed")) throw ConfigError("config.seed is required");
  read_u64(j, "seed", cfg.seed, "config");
  cfg.split_seed = cfg.seed;
  read_u64(j, "split_seed", cfg.split_seed, "config");
  read_count(j, "workers", cfg.workers, "config");

  const auto out = read_string(j, "output_dir", "", "config");
  if (!out.empty()) cfg.output_dir = fs::path(out).is_absolute() ? fs::path(out) : base_dir / out;
  if (const char* env = std::getenv("MALNAS_OUTPUT_DIR"); env && *env) cfg.output_dir = env;
  if (const char* env = std::getenv("MALNAS_WORKERS"); env && *env) {
    std::size_t pos = 0;
    long long w = 0;
    try {
      w = std::stoll(env, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != std::string_view(env).size() || w <= 0) throw ConfigError("MALNAS_WORKERS must be a positive integer");
    cfg.workers = static_cast<std::size_t>(w);
  }
  if (cfg.workers == 0) throw ConfigError("config.workers must be positive");
  if (cfg.output_dir.empty()) throw ConfigError("config.output_dir is required (or set MALNAS_OUTPUT_DIR)");

  if (!j.contains("data")) throw ConfigError("config.data is required");
  const auto& data = j["data"];
  if (cfg.kind == PipelineKind::static_ffnn) {
    check_keys(data, {"train", "test"}, "data");
    if (!data.contains("train") || !data.contains("test")) throw ConfigError("data.train and data.test are required");
  } else {
    check_keys(data, {"images", "snapshots", "network"}, "data");
    const bool raw = data.contains("snapshots") || data.contains("network");
    if (data.contains("images") == raw) {
      throw ConfigError("online data needs either data.images or data.snapshots with data.network");
    }
    if (raw && (!data.contains("snapshots") || !data.contains("network"))) {
      throw ConfigError("data.snapshots and data.network go together");
    }
  }
  json data_hashes = json::object();
  for (auto it = data.begin(); it != data.end(); ++it) {
    if (!it->is_string()) throw ConfigError("data." + it.key() + " must be a path");
    fs::path p = it->get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    if (!fs::is_regular_file(p)) throw ConfigError("data." + it.key() + ": file " + p.string() + " does not exist");
    cfg.data[it.key()] = p;
    // Content, not location, identifies the data.
    data_hashes[it.key()] = file_sha256(p);
  }

  const auto& ev = section(j, "eval");
  check_keys(ev, {"target_fpr"}, "eval");
  read_real(ev, "target_fpr", cfg.target_fpr, "eval");
  if (!(cfg.target_fpr > 0.0 && cfg.target_fpr < 1.0)) throw ConfigError("eval.target_fpr must lie in (0, 1)");

  cfg.canonical = {{"kind", std::string(to_string(cfg.kind))},
                   {"seed", cfg.seed},
                   {"split_seed", cfg.split_seed},
                   {"data", data_hashes},
                   {"eval", {{"target_fpr", cfg.target_fpr}}}};
  if (cfg.kind == PipelineKind::static_ffnn) {
    parse_static_phases(j, cfg);
  } else {
    parse_online_phases(j, cfg);
  }
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file " + path.string() + " does not exist");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_pipeline_config(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

json to_json(const RunManifest& manifest) {
  json artifacts = json::object();
  for (const auto& [name, entry] : manifest.artifacts) {
    artifacts[name] = {{"path", entry.path}, {"sha256", entry.sha256}};
  }
  return {{"kind", manifest.kind},
          {"config_hash", manifest.config_hash},
          {"artifacts", artifacts},
          {"chosen", manifest.chosen}};
}

RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.kind = j.at("kind").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [name, entry] : j.at("artifacts").items()) {
      m.artifacts[name] = ManifestEntry{entry.at("path").get<std::string>(), entry.at("sha256").get<std::string>()};
    }
    m.chosen = j.value("chosen", json::object());
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed manifest: ") + e.what());
  }
}

std::optional<RunManifest> read_manifest(const fs::path& output_dir) {
  const auto p = output_dir / kManifestFile;
  if (!fs::exists(p)) return std::nullopt;
  try {
    return manifest_from_json(json::parse(read_file(p)));
  } catch (const json::parse_error& e) {
    throw SchemaError("manifest " + p.string() + " is not valid JSON: " + e.what());
  }
}

void verify_manifest(const fs::path& output_dir, const RunManifest& manifest) {
  for (const auto& [name, entry] : manifest.artifacts) {
    const auto p = output_dir / entry.path;
    if (!fs::exists(p)) throw DataError("artifact " + name + " is missing at " + p.string());
    if (file_sha256(p) != entry.sha256) throw DataError("artifact " + name + " does not match its recorded hash");
  }
}

// ---------------------------------------------------------------------------
// Phases
// ---------------------------------------------------------------------------

void cmd_nas(const PipelineConfig& config, const LogFn& log) {
  Run run(config, true);
  PhaseTimer timer(config.output_dir, "nas");
  if (config.kind == PipelineKind::static_ffnn) {
    static_nas(config, run, log);
  } else {
    online_nas(config, run, log);
  }
  timer.done();
}

void cmd_tune(const PipelineConfig& config, const LogFn& log) {
  if (config.kind != PipelineKind::static_ffnn) throw ConfigError("the tune phase applies to static-ffnn pipelines");
  Run run(config, false);
  PhaseTimer timer(config.output_dir, "tune");
  static_tune(config, run, log);
  timer.done();
}

void cmd_train(const PipelineConfig& config, const LogFn& log) {
  Run run(config, false);
  PhaseTimer timer(config.output_dir, "train");
  if (config.kind == PipelineKind::static_ffnn) {
    static_train(config, run, log);
  } else {
    online_train(config, run, log);
  }
  timer.done();
}

EvalReport cmd_eval(const PipelineConfig& config, const LogFn& log) {
  Run run(config, false);
  PhaseTimer timer(config.output_dir, "eval");
  auto report = config.kind == PipelineKind::static_ffnn ? static_eval(config, run, log) : online_eval(config, run, log);
  timer.done();
  return report;
}

EvalReport cmd_pipeline(const PipelineConfig& config, const LogFn& log) {
  cmd_nas(config, log);
  if (config.kind == PipelineKind::static_ffnn) cmd_tune(config, log);
  cmd_train(config, log);
  return cmd_eval(config, log);
}

// ---------------------------------------------------------------------------
// Data and reporting commands
// ---------------------------------------------------------------------------

void cmd_datagen_static(const fs::path& out_dir, const StaticDatagenOptions& options, std::uint64_t seed) {
  if (!(options.test_fraction > 0.0 && options.test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie in (0, 1)");
  }
  const auto all = synth_static(options.synth, seed);
  const auto n_test = static_cast<std::size_t>(static_cast<double>(all.size()) * options.test_fraction);
  if (n_test == 0 || n_test >= all.size()) throw ConfigError("too few samples for a train/test split");
  fs::create_directories(out_dir);
  write_tabular(out_dir / "train.jsonl", all.slice(0, all.size() - n_test));
  write_tabular(out_dir / "test.jsonl", all.slice(all.size() - n_test, all.size()));
}

void cmd_datagen_online(const fs::path& out_dir, const TimelineSynthOptions& options, std::uint64_t seed) {
  const auto raw = synth_timelines(options, seed);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "snapshots.jsonl", snapshots_to_jsonl(raw.snapshots));
  write_file_atomic(out_dir / "network.jsonl", network_to_jsonl(raw.network));
}

std::size_t cmd_build_images(const fs::path& snapshots, const fs::path& network, const fs::path& out_file,
                             std::uint64_t split_seed, std::vector<std::string>* warnings) {
  OnlineRaw raw;
  raw.snapshots = parse_snapshots_jsonl(read_file(snapshots));
  raw.network = parse_network_jsonl(read_file(network));
  const auto corpus = build_image_corpus(raw, split_seed, warnings);
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  save_image_corpus(out_file, corpus);
  return corpus.samples.size();
}

std::string cmd_report(const fs::path& output_dir) {
  const auto manifest = read_manifest(output_dir);
  if (!manifest) throw DependencyError("no run manifest in " + output_dir.string());
  verify_manifest(output_dir, *manifest);
  const auto it = manifest->artifacts.find(kEvalReport);
  if (it == manifest->artifacts.end()) throw DependencyError("no evaluation report yet; run the eval phase first");
  const auto report = eval_report_from_json(json::parse(read_file(output_dir / it->second.path)));
  const bool online = manifest->kind == "online-darts";

  std::ostringstream os;
  os << "run: " << manifest->kind << "\nconfig hash: " << manifest->config_hash << "\n\n";
  os << (online ? online_table("darts", report) : static_table("ffnn", report)) << "\n";
  os << "evaluation report:\n";
  const auto fields = to_json(report);
  for (const auto& [key, value] : fields.items()) os << "  " << key << ": " << value.dump() << "\n";
  if (!manifest->chosen.empty()) {
    os << "\nchosen:\n";
    for (const auto& [key, value] : manifest->chosen.items()) {
      if (value.is_string()) {
        os << "  " << key << ":\n";
        std::istringstream lines(value.get<std::string>());
        for (std::string line; std::getline(lines, line);) os << "    " << line << "\n";
      } else {
        os << "  " << key << ": " << value.dump() << "\n";
      }
    }
  }

  const auto traj = manifest->artifacts.find(kNasTrajectory);
  if (traj != manifest->artifacts.end()) {
    const auto points = json::parse(read_file(output_dir / traj->second.path));
    std::ostringstream csv;
    csv << "epoch,mean_best_f1,mean_complexity\n";
    for (const auto& pt : points) {
      csv << pt.at("epoch").get<std::size_t>() << "," << format_double(pt.at("mean_best_f1").get<double>()) << ","
          << format_double(pt.at("mean_complexity").get<double>()) << "\n";
    }
    write_file_atomic(output_dir / kTrajectoryCsv, csv.str());
    os << "\ntop-k NAS trajectory (" << kTrajectoryCsv << "):\n" << csv.str();
  }
  const auto text = os.str();
  write_file_atomic(output_dir / kReport, text);
  return text;
}

}  // namespace malnas

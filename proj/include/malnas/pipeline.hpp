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
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "malnas/darts.hpp"
#include "malnas/ffnn.hpp"
#include "malnas/metrics.hpp"
#include "malnas/nas.hpp"
#include "malnas/search_space.hpp"
#include "malnas/tpe.hpp"

namespace malnas {

enum class PipelineKind { static_ffnn, online_darts };

std::string_view to_string(PipelineKind kind);
PipelineKind parse_pipeline_kind(std::string_view name);

struct StaticPhaseConfig {
  SearchSpace nas_space;
  std::size_t nas_trials = 150;
  std::size_t nas_epochs = 10;
  // Hyperparameters used while comparing architectures.
  HyperConfig nas_hyper;
  SearchSpace tune_space;
  std::size_t tune_trials = 150;
  std::size_t tune_epochs = 10;
  TpeParams tpe;
  SelectionMetric selection = SelectionMetric::f1;
  std::size_t final_epochs = 10;
  CountLoss count_loss = CountLoss::mse_log1p;
};

struct OnlinePhaseConfig {
  CellNetConfig network;
  DartsSearchOptions search;
  // Training-split images drawn (seeded) for the search; 0 uses all.
  std::size_t search_subsample = 0;
  FinalTrainOptions final;
};

struct PipelineConfig {
  PipelineKind kind = PipelineKind::static_ffnn;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path output_dir;
  // Static: "train" and "test" tabular files. Online: "images" (a corpus
  // file) or "snapshots" + "network" (raw records, featurized on the fly).
  std::map<std::string, std::filesystem::path> data;
  std::uint64_t split_seed = 0;
  StaticPhaseConfig static_phases;
  OnlinePhaseConfig online_phases;
  // Validation FPR at which the decision threshold is calibrated.
  double target_fpr = 0.01;
  // Canonical JSON of the settings that influence results (excludes
  // workers and output_dir).
  nlohmann::json canonical;

  std::string hash() const;
};

// Parses and validates a config document. Relative data paths resolve
// against base_dir; MALNAS_OUTPUT_DIR and MALNAS_WORKERS override the
// corresponding keys. ConfigError on any problem, including missing files.
PipelineConfig parse_pipeline_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct ManifestEntry {
  std::string path;  // relative to the output directory
  std::string sha256;
};

struct RunManifest {
  std::string kind;
  std::string config_hash;
  std::map<std::string, ManifestEntry> artifacts;
  nlohmann::json chosen = nlohmann::json::object();
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kTimingsFile = "timings.json";

nlohmann::json to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& j);
// Missing manifest -> nullopt.
std::optional<RunManifest> read_manifest(const std::filesystem::path& output_dir);
// DataError unless every artifact exists with its recorded hash.
void verify_manifest(const std::filesystem::path& output_dir, const RunManifest& manifest);

using LogFn = std::function<void(const std::string&)>;

// Each phase writes its artifacts atomically, then records them in the
// manifest. Later phases need the earlier artifacts (DependencyError) and a
// manifest produced by the same config (StalenessError).
void cmd_nas(const PipelineConfig& config, const LogFn& log = {});
void cmd_tune(const PipelineConfig& config, const LogFn& log = {});
void cmd_train(const PipelineConfig& config, const LogFn& log = {});
EvalReport cmd_eval(const PipelineConfig& config, const LogFn& log = {});
EvalReport cmd_pipeline(const PipelineConfig& config, const LogFn& log = {});

struct StaticDatagenOptions {
  StaticSynthOptions synth;
  double test_fraction = 0.2;
};

// Writes train.jsonl and test.jsonl.
void cmd_datagen_static(const std::filesystem::path& out_dir, const StaticDatagenOptions& options, std::uint64_t seed);
// Writes snapshots.jsonl and network.jsonl.
void cmd_datagen_online(const std::filesystem::path& out_dir, const TimelineSynthOptions& options, std::uint64_t seed);
// Returns the number of images written.
std::size_t cmd_build_images(const std::filesystem::path& snapshots, const std::filesystem::path& network,
                             const std::filesystem::path& out_file, std::uint64_t split_seed,
                             std::vector<std::string>* warnings = nullptr);
// Writes report.txt (and the trajectory CSV for static runs); returns the
// report text.
std::string cmd_report(const std::filesystem::path& output_dir);

}  // namespace malnas

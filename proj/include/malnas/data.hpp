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

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace malnas {

inline constexpr int kTabularSchemaVersion = 1;
inline constexpr int kOnlineSchemaVersion = 1;
inline constexpr int kImageSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Static tabular data
// ---------------------------------------------------------------------------

struct TabularDataset {
  std::size_t input_dim = 0;
  std::vector<double> features;  // row-major, size() x input_dim
  std::vector<int> labels;       // 1 malicious, 0 benign
  std::vector<std::string> tag_names;
  std::vector<double> tags;  // row-major, size() x tag_names.size(), 0/1
  bool has_counts = false;
  std::vector<double> vendor_counts;

  std::size_t size() const { return labels.size(); }
  std::size_t n_tags() const { return tag_names.size(); }
  bool has_tags() const { return !tag_names.empty(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * input_dim, input_dim}; }

  // Rows [begin, end) in order.
  TabularDataset slice(std::size_t begin, std::size_t end) const;
  // Throws DataError when the parallel arrays disagree in length.
  void check() const;
};

// JSONL (header line then one record per sample) or, for a ".csv" path,
// delimited text with a header row naming label / vendor_count / tags and
// the feature columns. Rows labeled "unknown" are dropped.
TabularDataset load_tabular(const std::filesystem::path& path);
TabularDataset parse_tabular_jsonl(std::string_view text);
TabularDataset parse_tabular_csv(std::string_view text);
std::string tabular_to_jsonl(const TabularDataset& data);
void write_tabular(const std::filesystem::path& path, const TabularDataset& data);

struct StaticSplit {
  TabularDataset train;
  TabularDataset valid;
};

// The final round(valid_fraction * n) rows, in source order, form validation.
StaticSplit split_static(const TabularDataset& pool, double valid_fraction = 0.20);

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population; 0 marks a constant feature
};

FeatureStats fit_stats(std::span<const double> rows, std::size_t dim);
// (x - mean) / stddev in place; constant features become 0.
void apply_stats(std::span<double> rows, const FeatureStats& stats);
// Fits on train and applies to every listed dataset (train included).
FeatureStats normalize(TabularDataset& train, std::span<TabularDataset* const> others);

nlohmann::json to_json(const FeatureStats& stats);
FeatureStats feature_stats_from_json(const nlohmann::json& j);

struct StaticSynthOptions {
  std::size_t n = 1000;
  std::size_t dim = 16;
  // 0 gives well separated classes; 1 gives identical class distributions.
  double difficulty = 0.0;
  std::size_t n_tags = 4;
  bool counts = true;
  double malicious_fraction = 0.5;
};

TabularDataset synth_static(const StaticSynthOptions& options, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Online process data
// ---------------------------------------------------------------------------

inline constexpr std::size_t kMetricCount = 26;
inline constexpr std::size_t kSnapshotMetricCount = 24;  // without sent/recv bytes
inline constexpr std::size_t kSentIndex = 24;
inline constexpr std::size_t kRecvIndex = 25;
extern const std::array<std::string_view, kMetricCount> kMetricNames;

inline constexpr double kInstantPeriod = 10.0;
inline constexpr std::size_t kInstantsPerExperiment = 60;
inline constexpr double kInjectionTime = 300.0;

struct ProcessKey {
  std::string cmdline;
  std::string exe_hash;

  auto operator<=>(const ProcessKey&) const = default;
  std::string str() const { return cmdline + " [" + exe_hash + "]"; }
};

struct ProcessSnapshot {
  std::string experiment;
  double timestamp = 0.0;
  std::int64_t pid = 0;
  ProcessKey key;
  std::array<double, kMetricCount> metrics{};
};

struct NetworkRecord {
  std::string experiment;
  double timestamp = 0.0;
  std::int64_t pid = 0;
  double sent_total = 0.0;
  double recv_total = 0.0;
};

struct OnlineRaw {
  std::vector<ProcessSnapshot> snapshots;
  std::vector<NetworkRecord> network;
};

std::string snapshots_to_jsonl(std::span<const ProcessSnapshot> snapshots);
std::vector<ProcessSnapshot> parse_snapshots_jsonl(std::string_view text);
std::string network_to_jsonl(std::span<const NetworkRecord> records);
std::vector<NetworkRecord> parse_network_jsonl(std::string_view text);

struct MergeResult {
  std::vector<ProcessSnapshot> snapshots;
  std::vector<std::string> warnings;
};

// Fills sent/recv bytes of each snapshot with the traffic its process
// accumulated since the previous instant. A network record is charged to the
// incarnation of its pid (same experiment) that was alive at that time, or
// that appeared within one period after it.
MergeResult merge_network(std::vector<ProcessSnapshot> snapshots, std::span<const NetworkRecord> records);

struct Instant {
  double timestamp = 0.0;
  std::vector<ProcessSnapshot> processes;
};

struct ExperimentTimeline {
  std::string id;
  double injection_time = kInjectionTime;
  std::vector<Instant> instants;  // kInstantsPerExperiment, ascending

  int label_at(double timestamp) const { return timestamp >= injection_time ? 1 : 0; }
};

// Groups merged snapshots into per-experiment timelines over the instants
// 0, 10, ..., 590. Sorted by experiment id.
std::vector<ExperimentTimeline> group_timelines(std::span<const ProcessSnapshot> snapshots);

// Most frequent process keys over every instant of the given timelines;
// ties by key order.
std::vector<ProcessKey> rank_common_processes(std::span<const ExperimentTimeline> timelines, std::size_t k = 32);

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kPinnedRows = 32;
inline constexpr std::size_t kUsedColumns = 2 * kMetricCount;
inline constexpr std::size_t kMaxProcesses = 128;

struct ImageSample {
  std::vector<float> pixels;  // kImageSize * kImageSize, row-major
  int label = 0;
  std::string experiment;
  double timestamp = 0.0;
};

// Per-metric standardization over every process row of the training timelines.
FeatureStats fit_metric_stats(std::span<const ExperimentTimeline> timelines);

// Places one instant into the (1, 64, 64) layout. Absent pinned processes
// leave zero rows; overflow beyond kMaxProcesses drops the unpinned processes
// with the lowest cpu_percent.
ImageSample build_image(const Instant& instant, std::span<const ProcessKey> pinned, const FeatureStats& stats,
                        int label = 0, const std::string& experiment = {});

struct OnlineSplit {
  std::vector<std::string> train;
  std::vector<std::string> valid;
  std::vector<std::string> test;
};

// Experiment-level 80/10/10 split after a seeded shuffle of the sorted ids.
OnlineSplit split_online(std::vector<std::string> experiment_ids, std::uint64_t seed);

struct ImageCorpus {
  std::vector<ProcessKey> pinned;
  FeatureStats stats;
  OnlineSplit split;
  std::vector<ImageSample> samples;
};

// Full online featurization: merge, group, split, rank pinned processes on
// the training experiments, fit stats on them, and render every instant.
ImageCorpus build_image_corpus(const OnlineRaw& raw, std::uint64_t split_seed, std::vector<std::string>* warnings = nullptr);

std::string encode_image_corpus(const ImageCorpus& corpus);
ImageCorpus decode_image_corpus(std::string_view bytes);
void save_image_corpus(const std::filesystem::path& path, const ImageCorpus& corpus);
ImageCorpus load_image_corpus(const std::filesystem::path& path);

struct TimelineSynthOptions {
  std::size_t n_experiments = 100;
  std::size_t common_processes = 36;
  std::size_t rare_pool = 120;
  std::size_t rare_per_experiment = 12;
  // Scales the post-injection perturbation; 1 is clearly detectable.
  double signal = 1.0;
};

OnlineRaw synth_timelines(const TimelineSynthOptions& options, std::uint64_t seed);

}  // namespace malnas

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

#include "malnas/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>

#include "malnas/error.hpp"
#include "malnas/io.hpp"
#include "malnas/rng.hpp"

namespace malnas {

const std::array<std::string_view, kMetricCount> kMetricNames = {
    "num_fds",
    "cpu_percent",
    "cpu_time_user",
    "cpu_time_system",
    "cpu_time_children_user",
    "cpu_time_children_system",
    "context_switches_voluntary",
    "context_switches_involuntary",
    "num_threads",
    "memory_info_rss",
    "memory_info_vms",
    "memory_info_shared",
    "memory_info_text",
    "memory_info_lib",
    "memory_info_data",
    "memory_info_dirty",
    "memory_info_pss",
    "memory_info_swap",
    "io_read_count",
    "io_write_count",
    "io_read_bytes",
    "io_write_bytes",
    "io_read_chars",
    "io_write_chars",
    "sent_bytes",
    "recv_bytes",
};

namespace {

constexpr std::size_t kCpuPercent = 1;

// Calls fn(line, line_number) for every non-blank line (1-based numbering).
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) fn(line, line_no);
    pos = end + 1;
  }
}

nlohmann::json parse_line(std::string_view line, std::size_t line_no) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line_no);
  }
}

void check_header(const nlohmann::json& j, std::string_view schema, int version, std::size_t line_no) {
  if (!j.is_object() || j.value("record", "") != "header") {
    throw SchemaError("line " + std::to_string(line_no) + ": expected a header record with schema '" +
                      std::string(schema) + "'");
  }
  if (j.value("schema", "") != schema) {
    throw SchemaError("schema '" + j.value("schema", "") + "' where '" + std::string(schema) + "' was expected");
  }
  if (j.value("schema_version", -1) != version) {
    throw SchemaError("unsupported " + std::string(schema) + " schema version " +
                      std::to_string(j.value("schema_version", -1)));
  }
}

// Returns 1, 0, or -1 for unknown.
int parse_label(std::string_view s, std::size_t row) {
  if (s == "malicious" || s == "1") return 1;
  if (s == "benign" || s == "0") return 0;
  if (s == "unknown" || s == "-1") return -1;
  throw ParseError("unrecognized label '" + std::string(s) + "'", row);
}

double parse_number(std::string_view s, std::size_t row) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ParseError("non-numeric value '" + std::string(s) + "'", row);
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t end = s.find(sep, pos);
    if (end == std::string_view::npos) {
      out.push_back(s.substr(pos));
      return out;
    }
    out.push_back(s.substr(pos, end - pos));
    pos = end + 1;
  }
}

struct PendingRow {
  std::vector<double> features;
  int label = 0;
  std::vector<std::string> tags;
  std::optional<double> count;
  std::size_t line = 0;
};

TabularDataset assemble(std::vector<PendingRow> rows, std::vector<std::string> tag_names, bool has_counts,
                        std::optional<std::size_t> declared_dim) {
  TabularDataset ds;
  if (tag_names.empty()) {
    std::set<std::string> names;
    for (const auto& r : rows) names.insert(r.tags.begin(), r.tags.end());
    tag_names.assign(names.begin(), names.end());
  }
  for (const auto& r : rows) has_counts = has_counts || r.count.has_value();
  ds.tag_names = tag_names;
  ds.has_counts = has_counts;
  std::map<std::string, std::size_t> tag_index;
  for (std::size_t i = 0; i < tag_names.size(); ++i) tag_index[tag_names[i]] = i;

  for (auto& r : rows) {
    if (r.label < 0) continue;
    if (ds.input_dim == 0 && ds.labels.empty()) ds.input_dim = declared_dim.value_or(r.features.size());
    if (r.features.size() != ds.input_dim || r.features.empty()) {
      throw ParseError("ragged row: " + std::to_string(r.features.size()) + " features where " +
                           std::to_string(ds.input_dim) + " were expected",
                       r.line);
    }
    ds.features.insert(ds.features.end(), r.features.begin(), r.features.end());
    ds.labels.push_back(r.label);
    std::vector<double> bits(tag_names.size(), 0.0);
    for (const auto& t : r.tags) {
      auto it = tag_index.find(t);
      if (it == tag_index.end()) throw ParseError("tag '" + t + "' is not declared in the header", r.line);
      bits[it->second] = 1.0;
    }
    ds.tags.insert(ds.tags.end(), bits.begin(), bits.end());
    if (has_counts) {
      if (!r.count) throw ParseError("vendor_count missing", r.line);
      if (*r.count < 0) throw ParseError("negative vendor_count", r.line);
      ds.vendor_counts.push_back(*r.count);
    }
  }
  if (ds.labels.empty()) throw DataError("tabular source holds no labeled samples");
  return ds;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tabular
// ---------------------------------------------------------------------------

TabularDataset TabularDataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw DataError("slice out of range");
  TabularDataset out;
  out.input_dim = input_dim;
  out.tag_names = tag_names;
  out.has_counts = has_counts;
  out.features.assign(features.begin() + static_cast<std::ptrdiff_t>(begin * input_dim),
                      features.begin() + static_cast<std::ptrdiff_t>(end * input_dim));
  out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.begin() + static_cast<std::ptrdiff_t>(end));
  const std::size_t t = n_tags();
  out.tags.assign(tags.begin() + static_cast<std::ptrdiff_t>(begin * t), tags.begin() + static_cast<std::ptrdiff_t>(end * t));
  if (has_counts) {
    out.vendor_counts.assign(vendor_counts.begin() + static_cast<std::ptrdiff_t>(begin),
                             vendor_counts.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

void TabularDataset::check() const {
  if (features.size() != size() * input_dim) throw DataError("feature matrix does not match the sample count");
  if (tags.size() != size() * n_tags()) throw DataError("tag matrix does not match the sample count");
  if (has_counts && vendor_counts.size() != size()) throw DataError("vendor counts do not match the sample count");
}

TabularDataset parse_tabular_jsonl(std::string_view text) {
  std::vector<PendingRow> rows;
  std::vector<std::string> tag_names;
  bool has_counts = false;
  std::optional<std::size_t> dim;
  bool header_seen = false;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    auto j = parse_line(line, line_no);
    if (!header_seen) {
      check_header(j, "malnas-tabular", kTabularSchemaVersion, line_no);
      header_seen = true;
      if (j.contains("tag_names")) tag_names = j["tag_names"].get<std::vector<std::string>>();
      has_counts = j.value("has_counts", false);
      if (j.contains("input_dim")) dim = j["input_dim"].get<std::size_t>();
      return;
    }
    PendingRow r;
    r.line = line_no;
    try {
      const auto& f = j.at("features");
      if (!f.is_array()) throw ParseError("features must be an array", line_no);
      r.features.reserve(f.size());
      for (const auto& v : f) {
        if (!v.is_number()) throw ParseError("non-numeric feature", line_no);
        r.features.push_back(v.get<double>());
      }
      r.label = parse_label(j.at("label").get<std::string>(), line_no);
      if (j.contains("tags") && !j["tags"].is_null()) r.tags = j["tags"].get<std::vector<std::string>>();
      if (j.contains("vendor_count") && !j["vendor_count"].is_null()) r.count = j["vendor_count"].get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed record: ") + e.what(), line_no);
    }
    rows.push_back(std::move(r));
  });
  if (!header_seen) throw DataError("tabular source is empty");
  return assemble(std::move(rows), std::move(tag_names), has_counts, dim);
}

TabularDataset parse_tabular_csv(std::string_view text) {
  std::vector<std::string> columns;
  std::optional<std::size_t> label_col, count_col, tags_col;
  std::vector<PendingRow> rows;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    auto cells = split(line, ',');
    if (columns.empty()) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        std::string name(cells[i]);
        if (name == "label") label_col = i;
        else if (name == "vendor_count") count_col = i;
        else if (name == "tags") tags_col = i;
        columns.push_back(std::move(name));
      }
      if (!label_col) throw SchemaError("CSV header has no 'label' column");
      return;
    }
    if (cells.size() != columns.size()) {
      throw ParseError("ragged row: " + std::to_string(cells.size()) + " cells where " +
                           std::to_string(columns.size()) + " were expected",
                       line_no);
    }
    PendingRow r;
    r.line = line_no;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == *label_col) {
        r.label = parse_label(cells[i], line_no);
      } else if (count_col && i == *count_col) {
        r.count = parse_number(cells[i], line_no);
      } else if (tags_col && i == *tags_col) {
        if (!cells[i].empty()) {
          for (auto t : split(cells[i], ';')) r.tags.emplace_back(t);
        }
      } else {
        r.features.push_back(parse_number(cells[i], line_no));
      }
    }
    rows.push_back(std::move(r));
  });
  if (columns.empty()) throw DataError("tabular source is empty");
  return assemble(std::move(rows), {}, count_col.has_value(), std::nullopt);
}

TabularDataset load_tabular(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("tabular source not found: " + path.string());
  const std::string text = read_file(path);
  if (path.extension() == ".csv") return parse_tabular_csv(text);
  return parse_tabular_jsonl(text);
}

std::string tabular_to_jsonl(const TabularDataset& data) {
  data.check();
  nlohmann::json header = {{"record", "header"},           {"schema", "malnas-tabular"},
                           {"schema_version", kTabularSchemaVersion}, {"input_dim", data.input_dim},
                           {"tag_names", data.tag_names},  {"has_counts", data.has_counts}};
  std::string out = header.dump() + "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto row = data.row(i);
    nlohmann::json r;
    r["features"] = std::vector<double>(row.begin(), row.end());
    r["label"] = data.labels[i] == 1 ? "malicious" : "benign";
    if (data.has_tags()) {
      std::vector<std::string> names;
      for (std::size_t t = 0; t < data.n_tags(); ++t) {
        if (data.tags[i * data.n_tags() + t] != 0.0) names.push_back(data.tag_names[t]);
      }
      r["tags"] = names;
    }
    if (data.has_counts) r["vendor_count"] = data.vendor_counts[i];
    out += r.dump();
    out += '\n';
  }
  return out;
}

void write_tabular(const std::filesystem::path& path, const TabularDataset& data) {
  write_file_atomic(path, tabular_to_jsonl(data));
}

StaticSplit split_static(const TabularDataset& pool, double valid_fraction) {
  if (pool.size() < 5) throw DataError("static split needs at least 5 samples");
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) throw ParameterError("valid_fraction must lie in (0, 1)");
  const auto n_valid = static_cast<std::size_t>(std::llround(valid_fraction * static_cast<double>(pool.size())));
  const std::size_t cut = pool.size() - n_valid;
  return {pool.slice(0, cut), pool.slice(cut, pool.size())};
}

FeatureStats fit_stats(std::span<const double> rows, std::size_t dim) {
  if (dim == 0 || rows.empty() || rows.size() % dim != 0) throw DataError("cannot fit statistics on an empty split");
  const std::size_t n = rows.size() / dim;
  FeatureStats s;
  s.mean.assign(dim, 0.0);
  s.stddev.assign(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) s.mean[j] += rows[i * dim + j];
  }
  for (auto& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = rows[i * dim + j] - s.mean[j];
      s.stddev[j] += d * d;
    }
  }
  for (auto& v : s.stddev) {
    v = std::sqrt(v / static_cast<double>(n));
    // Relative floor: treats numerically constant columns as constant.
    if (!(v > 0.0)) v = 0.0;
  }
  for (std::size_t j = 0; j < dim; ++j) {
    if (s.stddev[j] <= 1e-12 * std::max(1.0, std::abs(s.mean[j]))) s.stddev[j] = 0.0;
  }
  return s;
}

void apply_stats(std::span<double> rows, const FeatureStats& stats) {
  const std::size_t dim = stats.mean.size();
  if (dim == 0 || rows.size() % dim != 0) throw DimensionError("feature width does not match the statistics");
  for (std::size_t i = 0; i < rows.size(); i += dim) {
    for (std::size_t j = 0; j < dim; ++j) {
      double& x = rows[i + j];
      x = stats.stddev[j] > 0.0 ? (x - stats.mean[j]) / stats.stddev[j] : 0.0;
    }
  }
}

FeatureStats normalize(TabularDataset& train, std::span<TabularDataset* const> others) {
  auto stats = fit_stats(train.features, train.input_dim);
  apply_stats(train.features, stats);
  for (auto* d : others) {
    if (d->input_dim != train.input_dim) throw DimensionError("datasets disagree on feature width");
    apply_stats(d->features, stats);
  }
  return stats;
}

nlohmann::json to_json(const FeatureStats& stats) { return {{"mean", stats.mean}, {"stddev", stats.stddev}}; }

FeatureStats feature_stats_from_json(const nlohmann::json& j) {
  try {
    FeatureStats s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.stddev = j.at("stddev").get<std::vector<double>>();
    if (s.mean.size() != s.stddev.size()) throw SchemaError("mean and stddev differ in length");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed feature statistics: ") + e.what());
  }
}

TabularDataset synth_static(const StaticSynthOptions& o, std::uint64_t seed) {
  if (o.dim == 0) throw ParameterError("synthetic data needs dim >= 1");
  if (o.difficulty < 0.0 || o.difficulty > 1.0) throw ParameterError("difficulty must lie in [0, 1]");
  Rng world(mix_seed(seed, 0));
  // Class-mean direction, plus a per-feature affine distortion so that raw
  // columns live on very different scales.
  std::vector<double> direction(o.dim);
  double norm = 0.0;
  for (auto& d : direction) {
    d = world.normal();
    norm += d * d;
  }
  norm = std::sqrt(norm);
  for (auto& d : direction) d /= norm;
  std::vector<double> offset(o.dim), scale_(o.dim);
  for (std::size_t j = 0; j < o.dim; ++j) {
    offset[j] = world.uniform(-50.0, 50.0);
    scale_[j] = std::exp(world.uniform(std::log(0.1), std::log(100.0)));
  }
  std::vector<double> tag_rate(o.n_tags);
  for (std::size_t t = 0; t < o.n_tags; ++t) tag_rate[t] = 0.25 + 0.6 * static_cast<double>(t + 1) / static_cast<double>(o.n_tags);
  const double separation = 10.0 * (1.0 - o.difficulty);

  Rng rng(mix_seed(seed, 1));
  TabularDataset ds;
  ds.input_dim = o.dim;
  for (std::size_t t = 0; t < o.n_tags; ++t) ds.tag_names.push_back("tag" + std::to_string(t));
  ds.has_counts = o.counts;
  ds.features.reserve(o.n * o.dim);
  for (std::size_t i = 0; i < o.n; ++i) {
    const int y = rng.bernoulli(o.malicious_fraction) ? 1 : 0;
    const double shift = (y == 1 ? 0.5 : -0.5) * separation;
    for (std::size_t j = 0; j < o.dim; ++j) {
      const double z = rng.normal() + shift * direction[j];
      ds.features.push_back(offset[j] + scale_[j] * z);
    }
    ds.labels.push_back(y);
    for (std::size_t t = 0; t < o.n_tags; ++t) {
      ds.tags.push_back(rng.bernoulli(y == 1 ? tag_rate[t] : 0.02) ? 1.0 : 0.0);
    }
    if (o.counts) {
      const double c = y == 1 ? 5.0 + static_cast<double>(rng.below(46)) : static_cast<double>(rng.below(3));
      ds.vendor_counts.push_back(c);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Online records
// ---------------------------------------------------------------------------

std::string snapshots_to_jsonl(std::span<const ProcessSnapshot> snapshots) {
  std::vector<std::string_view> names(kMetricNames.begin(), kMetricNames.begin() + kSnapshotMetricCount);
  nlohmann::json header = {{"record", "header"}, {"schema", "malnas-snapshots"}, {"schema_version", kOnlineSchemaVersion},
                           {"metrics", names}};
  std::string out = header.dump() + "\n";
  for (const auto& s : snapshots) {
    nlohmann::json r = {{"experiment", s.experiment}, {"timestamp", s.timestamp}, {"pid", s.pid},
                        {"cmdline", s.key.cmdline},   {"exe_hash", s.key.exe_hash}};
    r["metrics"] = std::vector<double>(s.metrics.begin(), s.metrics.begin() + kSnapshotMetricCount);
    out += r.dump();
    out += '\n';
  }
  return out;
}

std::vector<ProcessSnapshot> parse_snapshots_jsonl(std::string_view text) {
  std::vector<ProcessSnapshot> out;
  bool header_seen = false;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    auto j = parse_line(line, line_no);
    if (!header_seen) {
      check_header(j, "malnas-snapshots", kOnlineSchemaVersion, line_no);
      auto names = j.value("metrics", std::vector<std::string>{});
      if (names.size() != kSnapshotMetricCount ||
          !std::equal(names.begin(), names.end(), kMetricNames.begin())) {
        throw SchemaError("snapshot header must list the " + std::to_string(kSnapshotMetricCount) +
                          " process metrics in canonical order");
      }
      header_seen = true;
      return;
    }
    ProcessSnapshot s;
    try {
      s.experiment = j.at("experiment").get<std::string>();
      s.timestamp = j.at("timestamp").get<double>();
      s.pid = j.at("pid").get<std::int64_t>();
      s.key.cmdline = j.at("cmdline").get<std::string>();
      s.key.exe_hash = j.at("exe_hash").get<std::string>();
      const auto& m = j.at("metrics");
      if (!m.is_array() || m.size() != kSnapshotMetricCount) {
        throw SchemaError("line " + std::to_string(line_no) + ": expected " + std::to_string(kSnapshotMetricCount) +
                          " metrics, got " + std::to_string(m.is_array() ? m.size() : 0));
      }
      for (std::size_t i = 0; i < kSnapshotMetricCount; ++i) s.metrics[i] = m[i].get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed snapshot: ") + e.what(), line_no);
    }
    if (s.timestamp < 0.0 || s.timestamp > 600.0) throw ParseError("timestamp outside [0, 600]", line_no);
    out.push_back(std::move(s));
  });
  if (!header_seen) throw DataError("snapshot source is empty");
  return out;
}

std::string network_to_jsonl(std::span<const NetworkRecord> records) {
  nlohmann::json header = {{"record", "header"}, {"schema", "malnas-network"}, {"schema_version", kOnlineSchemaVersion}};
  std::string out = header.dump() + "\n";
  for (const auto& r : records) {
    nlohmann::json j = {{"experiment", r.experiment}, {"timestamp", r.timestamp}, {"pid", r.pid},
                        {"sent_total", r.sent_total}, {"recv_total", r.recv_total}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<NetworkRecord> parse_network_jsonl(std::string_view text) {
  std::vector<NetworkRecord> out;
  bool header_seen = false;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    auto j = parse_line(line, line_no);
    if (!header_seen) {
      check_header(j, "malnas-network", kOnlineSchemaVersion, line_no);
      header_seen = true;
      return;
    }
    try {
      out.push_back({j.at("experiment").get<std::string>(), j.at("timestamp").get<double>(),
                     j.at("pid").get<std::int64_t>(), j.at("sent_total").get<double>(),
                     j.at("recv_total").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed network record: ") + e.what(), line_no);
    }
  });
  if (!header_seen) throw DataError("network source is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Network merge
// ---------------------------------------------------------------------------

namespace {

struct Incarnation {
  ProcessKey key;
  double first = 0.0;
  double last = 0.0;
  std::vector<const NetworkRecord*> records;  // time-ordered

  // Totals of the last record at or before t; zero before any record.
  std::pair<double, double> totals_at(double t) const {
    auto it = std::upper_bound(records.begin(), records.end(), t,
                               [](double v, const NetworkRecord* r) { return v < r->timestamp; });
    if (it == records.begin()) return {0.0, 0.0};
    const NetworkRecord* r = *(it - 1);
    return {r->sent_total, r->recv_total};
  }
};

using PidKey = std::pair<std::string, std::int64_t>;

}  // namespace

MergeResult merge_network(std::vector<ProcessSnapshot> snapshots, std::span<const NetworkRecord> records) {
  MergeResult result;
  // Incarnations per (experiment, pid), ordered by first appearance.
  std::map<PidKey, std::vector<Incarnation>> lineages;
  {
    std::vector<std::size_t> order(snapshots.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return snapshots[a].timestamp < snapshots[b].timestamp; });
    for (std::size_t idx : order) {
      const auto& s = snapshots[idx];
      auto& list = lineages[{s.experiment, s.pid}];
      // A key that reappears after another process held the pid starts a new incarnation.
      if (!list.empty() && list.back().key == s.key) {
        list.back().last = std::max(list.back().last, s.timestamp);
      } else {
        list.push_back({s.key, s.timestamp, s.timestamp, {}});
      }
    }
  }

  std::size_t unattributed = 0;
  std::vector<const NetworkRecord*> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const NetworkRecord* a, const NetworkRecord* b) { return a->timestamp < b->timestamp; });
  for (const NetworkRecord* r : sorted) {
    auto it = lineages.find({r->experiment, r->pid});
    Incarnation* target = nullptr;
    if (it != lineages.end()) {
      for (auto& inc : it->second) {
        if (inc.first <= r->timestamp && r->timestamp <= inc.last) target = &inc;
      }
      if (!target) {
        for (auto& inc : it->second) {
          if (inc.first - kInstantPeriod <= r->timestamp && r->timestamp < inc.first) target = &inc;
        }
      }
    }
    if (!target) {
      ++unattributed;
      continue;
    }
    if (!target->records.empty() && (r->sent_total < target->records.back()->sent_total ||
                                      r->recv_total < target->records.back()->recv_total)) {
      result.warnings.push_back("experiment " + r->experiment + " pid " + std::to_string(r->pid) +
                                ": cumulative network total decreased at t=" + format_double(r->timestamp));
    }
    target->records.push_back(r);
  }
  if (unattributed > 0) {
    result.warnings.push_back(std::to_string(unattributed) + " network records matched no live process");
  }

  for (auto& s : snapshots) {
    const auto& list = lineages.at({s.experiment, s.pid});
    const Incarnation* inc = nullptr;
    for (const auto& cand : list) {
      if (cand.key == s.key && cand.first <= s.timestamp && s.timestamp <= cand.last) inc = &cand;
    }
    auto [sent_now, recv_now] = inc->totals_at(s.timestamp);
    auto [sent_prev, recv_prev] = inc->totals_at(s.timestamp - kInstantPeriod);
    double sent = sent_now - sent_prev;
    double recv = recv_now - recv_prev;
    if (sent < 0.0 || recv < 0.0) {
      result.warnings.push_back("experiment " + s.experiment + " pid " + std::to_string(s.pid) +
                                ": negative traffic delta clamped to 0 at t=" + format_double(s.timestamp));
      sent = std::max(sent, 0.0);
      recv = std::max(recv, 0.0);
    }
    s.metrics[kSentIndex] = sent;
    s.metrics[kRecvIndex] = recv;
  }
  result.snapshots = std::move(snapshots);
  return result;
}

// ---------------------------------------------------------------------------
// Timelines and images
// ---------------------------------------------------------------------------

std::vector<ExperimentTimeline> group_timelines(std::span<const ProcessSnapshot> snapshots) {
  std::map<std::string, ExperimentTimeline> by_id;
  for (const auto& s : snapshots) {
    auto& tl = by_id[s.experiment];
    if (tl.instants.empty()) {
      tl.id = s.experiment;
      tl.instants.resize(kInstantsPerExperiment);
      for (std::size_t i = 0; i < kInstantsPerExperiment; ++i) tl.instants[i].timestamp = kInstantPeriod * static_cast<double>(i);
    }
    const double slot = s.timestamp / kInstantPeriod;
    if (slot != std::floor(slot)) {
      throw SchemaError("experiment " + s.experiment + ": timestamp " + format_double(s.timestamp) +
                        " is not on the 10-second collection grid");
    }
    const auto index = static_cast<std::size_t>(slot);
    if (index >= kInstantsPerExperiment) continue;  // the closing 600 s reading is not an instant
    tl.instants[index].processes.push_back(s);
  }
  std::vector<ExperimentTimeline> out;
  for (auto& [id, tl] : by_id) {
    for (auto& inst : tl.instants) {
      std::sort(inst.processes.begin(), inst.processes.end(), [](const ProcessSnapshot& a, const ProcessSnapshot& b) {
        return std::tie(a.key, a.pid) < std::tie(b.key, b.pid);
      });
    }
    out.push_back(std::move(tl));
  }
  return out;
}

std::vector<ProcessKey> rank_common_processes(std::span<const ExperimentTimeline> timelines, std::size_t k) {
  std::map<ProcessKey, std::size_t> counts;
  for (const auto& tl : timelines) {
    for (const auto& inst : tl.instants) {
      for (const auto& p : inst.processes) ++counts[p.key];
    }
  }
  std::vector<std::pair<ProcessKey, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<ProcessKey> out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) out.push_back(ranked[i].first);
  return out;
}

FeatureStats fit_metric_stats(std::span<const ExperimentTimeline> timelines) {
  std::vector<double> rows;
  for (const auto& tl : timelines) {
    for (const auto& inst : tl.instants) {
      for (const auto& p : inst.processes) rows.insert(rows.end(), p.metrics.begin(), p.metrics.end());
    }
  }
  return fit_stats(rows, kMetricCount);
}

ImageSample build_image(const Instant& instant, std::span<const ProcessKey> pinned, const FeatureStats& stats,
                        int label, const std::string& experiment) {
  if (stats.mean.size() != kMetricCount || stats.stddev.size() != kMetricCount) {
    throw SchemaError("image statistics must cover " + std::to_string(kMetricCount) + " metrics");
  }
  if (pinned.size() > kPinnedRows) throw ParameterError("at most 32 pinned processes fit the layout");
  ImageSample img;
  img.pixels.assign(kImageSize * kImageSize, 0.0f);
  img.label = label;
  img.experiment = experiment;
  img.timestamp = instant.timestamp;

  auto put = [&](std::size_t row, std::size_t col0, const ProcessSnapshot& p) {
    for (std::size_t m = 0; m < kMetricCount; ++m) {
      const double sd = stats.stddev[m];
      const double v = sd > 0.0 ? (p.metrics[m] - stats.mean[m]) / sd : 0.0;
      img.pixels[row * kImageSize + col0 + m] = static_cast<float>(v);
    }
  };

  std::map<ProcessKey, std::size_t> pinned_row;
  for (std::size_t i = 0; i < pinned.size(); ++i) pinned_row.emplace(pinned[i], i);
  std::vector<bool> taken(kPinnedRows, false);
  std::vector<const ProcessSnapshot*> rest;
  for (const auto& p : instant.processes) {
    auto it = pinned_row.find(p.key);
    if (it != pinned_row.end() && !taken[it->second]) {
      taken[it->second] = true;
      put(it->second, 0, p);
    } else {
      rest.push_back(&p);
    }
  }
  const std::size_t capacity = kMaxProcesses - kPinnedRows;
  auto by_key = [](const ProcessSnapshot* a, const ProcessSnapshot* b) {
    return std::tie(a->key, a->pid) < std::tie(b->key, b->pid);
  };
  if (rest.size() > capacity) {
    std::stable_sort(rest.begin(), rest.end(), [&](const ProcessSnapshot* a, const ProcessSnapshot* b) {
      if (a->metrics[kCpuPercent] != b->metrics[kCpuPercent]) return a->metrics[kCpuPercent] > b->metrics[kCpuPercent];
      return by_key(a, b);
    });
    rest.resize(capacity);
  }
  std::sort(rest.begin(), rest.end(), by_key);
  for (std::size_t slot = 0; slot < rest.size(); ++slot) {
    if (slot < kImageSize - kPinnedRows) {
      put(kPinnedRows + slot, 0, *rest[slot]);
    } else {
      put(slot - (kImageSize - kPinnedRows), kMetricCount, *rest[slot]);
    }
  }
  return img;
}

OnlineSplit split_online(std::vector<std::string> ids, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 10) throw DataError("online split needs at least 10 experiments, got " + std::to_string(ids.size()));
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * n));
  const auto n_valid = static_cast<std::size_t>(std::llround(0.1 * n));
  OnlineSplit s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                 ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.valid.begin(), s.valid.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

ImageCorpus build_image_corpus(const OnlineRaw& raw, std::uint64_t split_seed, std::vector<std::string>* warnings) {
  auto merged = merge_network(raw.snapshots, raw.network);
  if (warnings) warnings->insert(warnings->end(), merged.warnings.begin(), merged.warnings.end());
  auto timelines = group_timelines(merged.snapshots);
  std::vector<std::string> ids;
  for (const auto& tl : timelines) ids.push_back(tl.id);

  ImageCorpus corpus;
  corpus.split = split_online(ids, split_seed);
  std::set<std::string> train_ids(corpus.split.train.begin(), corpus.split.train.end());
  std::vector<ExperimentTimeline> train;
  for (const auto& tl : timelines) {
    if (train_ids.count(tl.id)) train.push_back(tl);
  }
  corpus.pinned = rank_common_processes(train, kPinnedRows);
  corpus.stats = fit_metric_stats(train);
  for (const auto& tl : timelines) {
    for (const auto& inst : tl.instants) {
      corpus.samples.push_back(build_image(inst, corpus.pinned, corpus.stats, tl.label_at(inst.timestamp), tl.id));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Image corpus file: "MALNASIM", u32 version, u64 metadata length, JSON
// metadata, then per sample: u32 id length, id bytes, f64 timestamp,
// u8 label, kImageSize^2 f32 pixels. All integers and floats little-endian.
// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little, "corpus encoding assumes a little-endian host");

constexpr char kImageMagic[8] = {'M', 'A', 'L', 'N', 'A', 'S', 'I', 'M'};

template <typename T>
void put_raw(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw SchemaError("image corpus is truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

nlohmann::json keys_to_json(const std::vector<ProcessKey>& keys) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& k : keys) arr.push_back({{"cmdline", k.cmdline}, {"exe_hash", k.exe_hash}});
  return arr;
}

}  // namespace

std::string encode_image_corpus(const ImageCorpus& corpus) {
  nlohmann::json meta = {{"schema_version", kImageSchemaVersion},
                         {"image_size", kImageSize},
                         {"pinned", keys_to_json(corpus.pinned)},
                         {"stats", to_json(corpus.stats)},
                         {"split", {{"train", corpus.split.train}, {"valid", corpus.split.valid}, {"test", corpus.split.test}}},
                         {"samples", corpus.samples.size()}};
  const std::string meta_text = meta.dump();
  std::string out(kImageMagic, sizeof(kImageMagic));
  put_raw(out, static_cast<std::uint32_t>(kImageSchemaVersion));
  put_raw(out, static_cast<std::uint64_t>(meta_text.size()));
  out += meta_text;
  out.reserve(out.size() + corpus.samples.size() * (kImageSize * kImageSize * 4 + 32));
  for (const auto& s : corpus.samples) {
    if (s.pixels.size() != kImageSize * kImageSize) throw DimensionError("image sample has the wrong pixel count");
    put_raw(out, static_cast<std::uint32_t>(s.experiment.size()));
    out += s.experiment;
    put_raw(out, s.timestamp);
    put_raw(out, static_cast<std::uint8_t>(s.label));
    out.append(reinterpret_cast<const char*>(s.pixels.data()), s.pixels.size() * sizeof(float));
  }
  return out;
}

ImageCorpus decode_image_corpus(std::string_view bytes) {
  Reader r{bytes};
  if (r.take(sizeof(kImageMagic)) != std::string_view(kImageMagic, sizeof(kImageMagic))) {
    throw SchemaError("not an image corpus (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kImageSchemaVersion) throw SchemaError("unsupported image corpus version " + std::to_string(version));
  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("image corpus metadata: ") + e.what());
  }
  ImageCorpus corpus;
  try {
    if (meta.at("image_size").get<std::size_t>() != kImageSize) throw SchemaError("image corpus has a different image size");
    for (const auto& k : meta.at("pinned")) {
      corpus.pinned.push_back({k.at("cmdline").get<std::string>(), k.at("exe_hash").get<std::string>()});
    }
    corpus.stats = feature_stats_from_json(meta.at("stats"));
    corpus.split.train = meta.at("split").at("train").get<std::vector<std::string>>();
    corpus.split.valid = meta.at("split").at("valid").get<std::vector<std::string>>();
    corpus.split.test = meta.at("split").at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("image corpus metadata: ") + e.what());
  }
  const auto n = meta.at("samples").get<std::size_t>();
  corpus.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ImageSample s;
    const auto id_len = r.get<std::uint32_t>();
    s.experiment = std::string(r.take(id_len));
    s.timestamp = r.get<double>();
    s.label = r.get<std::uint8_t>();
    auto raw = r.take(kImageSize * kImageSize * sizeof(float));
    s.pixels.resize(kImageSize * kImageSize);
    std::memcpy(s.pixels.data(), raw.data(), raw.size());
    corpus.samples.push_back(std::move(s));
  }
  if (r.pos != bytes.size()) throw SchemaError("trailing bytes after the image corpus");
  return corpus;
}

void save_image_corpus(const std::filesystem::path& path, const ImageCorpus& corpus) {
  write_file_atomic(path, encode_image_corpus(corpus));
}

ImageCorpus load_image_corpus(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("image corpus not found: " + path.string());
  return decode_image_corpus(read_file(path));
}

// ---------------------------------------------------------------------------
// Synthetic timelines
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<std::string_view, 16> kSystemBinaries = {
    "/usr/lib/systemd/systemd --system",   "/usr/sbin/sshd -D",
    "/usr/sbin/cron -f",                   "/usr/sbin/rsyslogd -n",
    "/usr/bin/dbus-daemon --system",       "/usr/lib/systemd/systemd-journald",
    "/usr/lib/systemd/systemd-udevd",      "/usr/lib/systemd/systemd-logind",
    "/usr/sbin/irqbalance --foreground",   "/usr/lib/accountsservice/accounts-daemon",
    "/usr/bin/containerd",                 "/usr/sbin/nginx -g daemon off;",
    "/usr/lib/postgresql/bin/postgres",    "/usr/bin/python3 /opt/app/worker.py",
    "/usr/sbin/chronyd -F 1",              "/usr/bin/redis-server 127.0.0.1:6379",
};

std::string hex_id(std::uint64_t v, std::size_t digits) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(digits, '0');
  for (std::size_t i = 0; i < digits; ++i) s[digits - 1 - i] = kHex[(v >> (4 * (i % 16))) & 0xF];
  return s;
}

struct Profile {
  ProcessKey key;
  double cpu = 0.0;
  double fds = 0.0;
  double threads = 1.0;
  std::array<double, 9> memory{};
  double ctx_voluntary = 0.0;
  double ctx_involuntary = 0.0;
  std::array<double, 6> io{};  // per-period increments
  double sent = 0.0;           // bytes per period
  double recv = 0.0;
};

double lognormal(Rng& rng, double median, double sigma) { return median * std::exp(sigma * rng.normal()); }

Profile make_profile(Rng& rng, ProcessKey key) {
  Profile p;
  p.key = std::move(key);
  p.cpu = lognormal(rng, 0.6, 1.0);
  p.fds = std::round(lognormal(rng, 30.0, 0.8));
  p.threads = static_cast<double>(1 + rng.below(24));
  const double rss = lognormal(rng, 2.0e7, 1.0);
  p.memory = {rss,        rss * lognormal(rng, 8.0, 0.4), rss * 0.4, rss * 0.08, 0.0,
              rss * 1.6,  0.0,                            rss * 0.7, 0.0};
  p.ctx_voluntary = lognormal(rng, 40.0, 1.0);
  p.ctx_involuntary = lognormal(rng, 4.0, 1.0);
  const double reads = lognormal(rng, 30.0, 1.2);
  const double writes = lognormal(rng, 10.0, 1.2);
  p.io = {reads, writes, reads * 4096.0, writes * 4096.0, reads * 6000.0, writes * 5000.0};
  if (rng.bernoulli(0.4)) {
    p.sent = lognormal(rng, 2000.0, 1.2);
    p.recv = lognormal(rng, 4000.0, 1.2);
  }
  return p;
}

Profile make_malware_profile(Rng& rng, double signal) {
  const std::uint64_t tag = rng.next_u64();
  Profile p = make_profile(rng, {"/tmp/.cache/" + hex_id(tag, 8) + " --daemon", hex_id(mix_seed(tag, 7), 16)});
  p.cpu = signal * rng.uniform(35.0, 90.0);
  p.threads = static_cast<double>(4 + rng.below(12));
  p.ctx_voluntary *= 1.0 + 20.0 * signal;
  p.ctx_involuntary *= 1.0 + 20.0 * signal;
  for (auto& v : p.io) v *= 1.0 + 30.0 * signal;
  p.sent = signal * lognormal(rng, 4.0e5, 0.5);
  p.recv = signal * lognormal(rng, 1.0e5, 0.5);
  return p;
}

struct Live {
  const Profile* profile = nullptr;
  std::int64_t pid = 0;
  double start = 0.0;
  double end = 0.0;
  bool perturbed = false;
  // Cumulative counters: cpu times (4), ctx switches (2), io (6), net (2).
  std::array<double, 4> cpu_times{};
  std::array<double, 2> ctx{};
  std::array<double, 6> io{};
  double sent_total = 0.0;
  double recv_total = 0.0;
};

void emit_instant(Live& p, const std::string& experiment, double t, double signal, double injection, Rng& rng,
                  OnlineRaw& out) {
  const Profile& pr = *p.profile;
  const bool boosted = p.perturbed && t >= injection;
  const double cpu_scale = boosted ? 1.0 + 3.0 * signal : 1.0;
  const double io_scale = boosted ? 1.0 + 5.0 * signal : 1.0;
  const double cpu = pr.cpu * cpu_scale * std::exp(0.35 * rng.normal());

  if (t > p.start) {
    const double busy = cpu / 100.0 * kInstantPeriod;
    p.cpu_times[0] += 0.7 * busy;
    p.cpu_times[1] += 0.3 * busy;
    p.ctx[0] += pr.ctx_voluntary * cpu_scale * std::exp(0.3 * rng.normal());
    p.ctx[1] += pr.ctx_involuntary * cpu_scale * std::exp(0.3 * rng.normal());
    for (std::size_t i = 0; i < 6; ++i) p.io[i] += pr.io[i] * io_scale * std::exp(0.3 * rng.normal());
  }
  if (pr.sent > 0.0 || pr.recv > 0.0) {
    const double net_scale = boosted ? 1.0 + 4.0 * signal : 1.0;
    p.sent_total += std::round(pr.sent * net_scale * std::exp(0.5 * rng.normal()));
    p.recv_total += std::round(pr.recv * net_scale * std::exp(0.5 * rng.normal()));
    const double lag = static_cast<double>(rng.below(10));
    out.network.push_back({experiment, t - lag, p.pid, p.sent_total, p.recv_total});
  }

  ProcessSnapshot s;
  s.experiment = experiment;
  s.timestamp = t;
  s.pid = p.pid;
  s.key = pr.key;
  auto& m = s.metrics;
  m[0] = std::max(3.0, pr.fds + static_cast<double>(rng.below(5)) - 2.0);
  m[1] = std::round(cpu * 10.0) / 10.0;
  for (std::size_t i = 0; i < 4; ++i) m[2 + i] = std::round(p.cpu_times[i] * 100.0) / 100.0;
  m[6] = std::round(p.ctx[0]);
  m[7] = std::round(p.ctx[1]);
  m[8] = pr.threads;
  for (std::size_t i = 0; i < 9; ++i) m[9 + i] = std::round(pr.memory[i] * (1.0 + 0.02 * rng.normal()));
  for (std::size_t i = 0; i < 6; ++i) m[18 + i] = std::round(p.io[i]);
  out.snapshots.push_back(std::move(s));
}

}  // namespace

OnlineRaw synth_timelines(const TimelineSynthOptions& o, std::uint64_t seed) {
  Rng world(mix_seed(seed, 0));
  std::vector<Profile> commons;
  for (std::size_t i = 0; i < o.common_processes; ++i) {
    std::string cmd(kSystemBinaries[i % kSystemBinaries.size()]);
    if (i >= kSystemBinaries.size()) cmd += " --instance=" + std::to_string(i / kSystemBinaries.size());
    commons.push_back(make_profile(world, {cmd, hex_id(world.next_u64(), 16)}));
  }
  std::vector<Profile> rares;
  for (std::size_t i = 0; i < o.rare_pool; ++i) {
    rares.push_back(make_profile(world, {"/usr/bin/task-" + std::to_string(i) + " --job " + hex_id(world.next_u64(), 6),
                                         hex_id(world.next_u64(), 16)}));
  }

  OnlineRaw out;
  for (std::size_t e = 0; e < o.n_experiments; ++e) {
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "exp-%03zu", e);
    const std::string id = id_buf;
    Rng rng(mix_seed(seed, 1000 + e));
    std::int64_t next_pid = 1000 + static_cast<std::int64_t>(rng.below(20000));
    std::vector<Live> live;
    auto add = [&](const Profile* pr, double start, double end, std::int64_t pid) {
      Live l;
      l.profile = pr;
      l.pid = pid;
      l.start = start;
      l.end = end;
      // Processes arrive with history: counters start at an arbitrary age.
      const double age = rng.uniform(1e3, 1e5);
      l.cpu_times = {pr->cpu / 100.0 * age * 0.7, pr->cpu / 100.0 * age * 0.3, rng.uniform(0.0, 50.0),
                     rng.uniform(0.0, 20.0)};
      l.ctx = {pr->ctx_voluntary * age / kInstantPeriod, pr->ctx_involuntary * age / kInstantPeriod};
      for (std::size_t i = 0; i < 6; ++i) l.io[i] = pr->io[i] * age / kInstantPeriod;
      l.sent_total = std::round(rng.uniform(0.0, 1e6));
      l.recv_total = std::round(rng.uniform(0.0, 1e6));
      live.push_back(l);
    };

    for (const auto& pr : commons) {
      if (!rng.bernoulli(0.92)) continue;
      next_pid += 1 + static_cast<std::int64_t>(rng.below(40));
      add(&pr, 0.0, 590.0, next_pid);
    }
    std::vector<std::size_t> pool(rares.size());
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    rng.shuffle(pool.begin(), pool.end());
    const std::size_t n_rare = std::min(o.rare_per_experiment, pool.size());
    // Latest exit time per pid handed to a short-lived process.
    std::map<std::int64_t, double> released;
    for (std::size_t r = 0; r < n_rare; ++r) {
      const double start = kInstantPeriod * static_cast<double>(rng.below(50));
      const double end = std::min(590.0, start + kInstantPeriod * static_cast<double>(3 + rng.below(30)));
      std::int64_t pid = next_pid + 40 + static_cast<std::int64_t>(r);
      // Occasionally recycle the pid of an exited process.
      for (const auto& [old_pid, old_end] : released) {
        if (old_end + 2 * kInstantPeriod <= start && rng.bernoulli(0.5)) {
          pid = old_pid;
          break;
        }
      }
      released[pid] = end;
      add(&rares[pool[r]], start, end, pid);
    }
    const Profile malware = make_malware_profile(rng, o.signal);
    add(&malware, kInjectionTime, 590.0, next_pid + 41 + static_cast<std::int64_t>(n_rare + rng.below(1000)));
    // Neighbors disturbed by the injected process.
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i + 1 < live.size(); ++i) {
      if (live[i].start == 0.0) candidates.push_back(i);
    }
    rng.shuffle(candidates.begin(), candidates.end());
    for (std::size_t i = 0; i < std::min<std::size_t>(4, candidates.size()); ++i) live[candidates[i]].perturbed = true;

    // Network collection starts one period before a process is first seen.
    for (auto& p : live) {
      if (p.profile->sent > 0.0 || p.profile->recv > 0.0) {
        out.network.push_back({id, p.start - kInstantPeriod, p.pid, p.sent_total, p.recv_total});
      }
    }
    for (std::size_t k = 0; k < kInstantsPerExperiment; ++k) {
      const double t = kInstantPeriod * static_cast<double>(k);
      for (auto& p : live) {
        if (t >= p.start && t <= p.end) emit_instant(p, id, t, o.signal, kInjectionTime, rng, out);
      }
    }
  }
  std::stable_sort(out.network.begin(), out.network.end(), [](const NetworkRecord& a, const NetworkRecord& b) {
    return std::tie(a.experiment, a.timestamp) < std::tie(b.experiment, b.timestamp);
  });
  return out;
}

}  // namespace malnas

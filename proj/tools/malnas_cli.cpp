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
// Command-line front end. Exit codes: 0 success, 1 config error, 2 data
// error, 3 runtime failure.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "malnas/error.hpp"
#include "malnas/pipeline.hpp"

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kData = 2, kRuntime = 3 };

int exit_code_for(const malnas::Error& e) {
  if (dynamic_cast<const malnas::ConfigError*>(&e) || dynamic_cast<const malnas::DependencyError*>(&e) ||
      dynamic_cast<const malnas::StalenessError*>(&e)) {
    return kConfig;
  }
  if (dynamic_cast<const malnas::DataError*>(&e)) return kData;
  return kRuntime;
}

malnas::LogFn make_logger(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) { std::cerr << "malnas: " << line << '\n'; };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Architecture search and tuning for malware detectors"};
  app.require_subcommand(1);

  std::string config_path;
  bool quiet = false;
  auto add_phase = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "Pipeline config (JSON)")->required();
    sub->add_flag("-q,--quiet", quiet, "Suppress progress lines");
    return sub;
  };
  auto* nas = add_phase("nas", "Run the architecture search phase");
  auto* tune = add_phase("tune", "Run TPE hyperparameter tuning (static pipelines)");
  auto* train = add_phase("train", "Train the final model from the chosen configuration");
  auto* eval = add_phase("eval", "Evaluate the final model on the test split");
  auto* pipeline = add_phase("pipeline", "Run every phase in order");

  std::string kind = "static";
  std::string out_dir;
  std::uint64_t seed = 0;
  malnas::StaticDatagenOptions static_opts;
  malnas::TimelineSynthOptions online_opts;
  bool no_counts = false;
  auto* datagen = app.add_subcommand("datagen", "Write a synthetic dataset");
  datagen->add_option("--kind", kind, "static or online")->check(CLI::IsMember({"static", "online"}));
  datagen->add_option("-o,--out", out_dir, "Output directory")->required();
  datagen->add_option("--seed", seed, "Generator seed")->required();
  datagen->add_option("--samples", static_opts.synth.n, "Static: number of samples");
  datagen->add_option("--dim", static_opts.synth.dim, "Static: feature width");
  datagen->add_option("--tags", static_opts.synth.n_tags, "Static: number of tag columns");
  datagen->add_flag("--no-counts", no_counts, "Static: omit vendor counts");
  datagen->add_option("--difficulty", static_opts.synth.difficulty, "Static: class overlap, 0 separable to 1 identical");
  datagen->add_option("--malicious-fraction", static_opts.synth.malicious_fraction, "Static: share of positives");
  datagen->add_option("--test-fraction", static_opts.test_fraction, "Static: share written to test.jsonl");
  datagen->add_option("--experiments", online_opts.n_experiments, "Online: number of experiments");
  datagen->add_option("--signal", online_opts.signal, "Online: strength of the post-injection change");

  std::string snapshots, network, images_out;
  std::uint64_t split_seed = 0;
  auto* build = app.add_subcommand("build-images", "Featurize raw process records into an image corpus");
  build->add_option("--snapshots", snapshots, "Process snapshot JSONL")->required()->check(CLI::ExistingFile);
  build->add_option("--network", network, "Network record JSONL")->required()->check(CLI::ExistingFile);
  build->add_option("-o,--out", images_out, "Corpus file to write")->required();
  build->add_option("--split-seed", split_seed, "Seed of the experiment split")->required();

  std::string report_dir;
  auto* report = app.add_subcommand("report", "Render tables and curve exports for a finished run");
  auto* report_dir_opt = report->add_option("-d,--output-dir", report_dir, "Run output directory");
  report->add_option("-c,--config", config_path, "Pipeline config (uses its output directory)")
      ->excludes(report_dir_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    const auto log = make_logger(quiet);
    if (nas->parsed()) {
      malnas::cmd_nas(malnas::load_pipeline_config(config_path), log);
    } else if (tune->parsed()) {
      malnas::cmd_tune(malnas::load_pipeline_config(config_path), log);
    } else if (train->parsed()) {
      malnas::cmd_train(malnas::load_pipeline_config(config_path), log);
    } else if (eval->parsed() || pipeline->parsed()) {
      const auto cfg = malnas::load_pipeline_config(config_path);
      const auto rep = eval->parsed() ? malnas::cmd_eval(cfg, log) : malnas::cmd_pipeline(cfg, log);
      std::cout << (cfg.kind == malnas::PipelineKind::online_darts ? malnas::online_table("darts", rep)
                                                                   : malnas::static_table("ffnn", rep));
    } else if (datagen->parsed()) {
      if (kind == "static") {
        static_opts.synth.counts = !no_counts;
        malnas::cmd_datagen_static(out_dir, static_opts, seed);
      } else {
        malnas::cmd_datagen_online(out_dir, online_opts, seed);
      }
    } else if (build->parsed()) {
      std::vector<std::string> warnings;
      const auto n = malnas::cmd_build_images(snapshots, network, images_out, split_seed, &warnings);
      for (const auto& w : warnings) std::cerr << "malnas: warning: " << w << '\n';
      std::cout << n << " images written to " << images_out << '\n';
    } else if (report->parsed()) {
      std::filesystem::path dir = report_dir;
      if (dir.empty()) {
        if (config_path.empty()) throw malnas::ConfigError("report needs --output-dir or --config");
        dir = malnas::load_pipeline_config(config_path).output_dir;
      }
      std::cout << malnas::cmd_report(dir);
    }
  } catch (const malnas::Error& e) {
    std::cerr << "malnas: error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "malnas: error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}

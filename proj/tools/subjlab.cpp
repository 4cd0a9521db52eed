/*
 * Copyright 2026 The subjlab Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// subjlab <subcommand> --config PATH [--set key=value ...] [--seed N]

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "subjlab/experiment.hpp"
#include "subjlab/synthetic.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config,-c", args.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sub->add_option("--set", args.overrides, "override a config key, e.g. --set train.DS-sup.epochs=3")
      ->type_name("KEY=VALUE");
  sub->add_option("--seed", args.seed, "run a single seed instead of split.seeds");
  sub->add_flag("--quiet,-q", args.quiet, "no progress output");
}

int finish(const subjlab::CommandResult& r, bool quiet) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  if (!quiet) {
    for (const auto& f : r.written) std::cerr << "wrote " << f << "\n";
  }
  if (!r.ok()) {
    std::cerr << "error: training failed for seed(s):";
    for (auto s : r.failed_seeds) std::cerr << " " << s;
    std::cerr << "; completed runs were kept\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subjlab: subjectivity detection experiments on multi-annotator value labels"};
  app.require_subcommand(1);

  CommonArgs common;
  auto* prepare = app.add_subcommand("prepare", "parse annotations, write the corpus cache and data report");
  auto* train = app.add_subcommand("train", "train the configured method for every seed");
  auto* evaluate = app.add_subcommand("evaluate", "score trained runs on the test split");
  auto* baseline = app.add_subcommand("baseline", "score the random baseline on the test split");
  auto* exporter = app.add_subcommand("export-embeddings", "write embeddings of one split part");
  for (auto* sub : {prepare, train, evaluate, baseline, exporter}) add_common(sub, common);

  subjlab::ExportOptions export_opts;
  exporter->add_option("--part", export_opts.part, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  exporter->add_option("--value", export_opts.value, "position in the selected value set");
  exporter->add_option("--annotator", export_opts.annotator, "IS models: annotator whose model embeds");
  exporter->add_option("--out", export_opts.out, "output path");
  bool no_projection = false;
  exporter->add_flag("--no-projection", no_projection, "omit the principal-component columns");

  subjlab::SyntheticSpec synth_spec;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a keyword-driven synthetic annotation file");
  synth->add_option("--out,-o", synth_out, "output TSV")->required();
  synth->add_option("--arguments", synth_spec.n_arguments);
  synth->add_option("--annotators", synth_spec.n_annotators);
  synth->add_option("--values", synth_spec.n_values);
  synth->add_option("--extra-columns", synth_spec.extra_columns);
  synth->add_option("--vocabulary", synth_spec.filler_vocabulary);
  synth->add_option("--subjective-rate", synth_spec.subjective_rate);
  synth->add_option("--seed", synth_spec.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      const auto records = subjlab::make_synthetic_records(synth_spec);
      std::ofstream out(synth_out, std::ios::binary | std::ios::trunc);
      if (!out) throw subjlab::Error("cannot write " + synth_out);
      subjlab::write_annotation_table(out, records);
      std::cerr << "wrote " << records.size() << " records to " << synth_out << "\n";
      return 0;
    }
    const auto config = subjlab::load_config(common.config, common.overrides, common.seed);
    subjlab::LogSink log;
    if (!common.quiet) log = [](const std::string& line) { std::cerr << line << "\n"; };
    if (prepare->parsed()) return finish(subjlab::cmd_prepare(config, log), common.quiet);
    if (train->parsed()) return finish(subjlab::cmd_train(config, log), common.quiet);
    if (evaluate->parsed()) return finish(subjlab::cmd_evaluate(config, log), common.quiet);
    if (baseline->parsed()) return finish(subjlab::cmd_baseline(config, log), common.quiet);
    if (exporter->parsed()) {
      export_opts.seed = common.seed;
      export_opts.projection = !no_projection;
      return finish(subjlab::cmd_export_embeddings(config, export_opts, log), common.quiet);
    }
  } catch (const subjlab::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

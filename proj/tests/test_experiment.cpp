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

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "subjlab/experiment.hpp"
#include "subjlab/synthetic.hpp"

using namespace subjlab;
namespace fs = std::filesystem;

namespace {

const std::string kSource = SUBJLAB_SOURCE_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("subjlab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

class ExperimentTest : public ::testing::Test {
 protected:
  void SetUp() override {
    unsetenv(kCacheDirEnv);
    unsetenv(kOfflineEnv);
  }
};

ExperimentConfig tiny_config(const fs::path& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> o{"data.input=" + kSource + "/tests/data/tiny.tsv", "data.annotator_k=3",
                             "data.value_k=2", "output_dir=" + out.string(), "split.seeds=[1,2]",
                             "train.DS-sup.learning_rate=0.05", "train.DS-simple.learning_rate=0.05"};
  o.insert(o.end(), extra.begin(), extra.end());
  return load_config("", o);
}

fs::path write_synthetic(const fs::path& dir, std::size_t n) {
  SyntheticSpec spec;
  spec.n_arguments = n;
  const auto path = dir / "synthetic.tsv";
  std::ofstream out(path);
  write_annotation_table(out, make_synthetic_records(spec));
  return path;
}

ExperimentConfig synthetic_config(const fs::path& out, const fs::path& input, std::vector<std::string> extra) {
  std::vector<std::string> o{"data.input=" + input.string(), "data.value_k=4", "output_dir=" + out.string(),
                             "split.seeds=[1]", "offline=true"};
  for (const char* key : {"IS", "DS-simple", "DS-sup", "DS-unsup"}) {
    o.push_back(std::string("train.") + key + ".learning_rate=0.05");
    o.push_back(std::string("train.") + key + ".epochs=20");
  }
  o.insert(o.end(), extra.begin(), extra.end());
  return load_config("", o);
}

}  // namespace

TEST_F(ExperimentTest, ShippedDefaultConfigMatchesBuiltInDefaults) {
  std::ifstream in(kSource + "/configs/default.json");
  ASSERT_TRUE(in);
  const auto shipped = nlohmann::json::parse(in, nullptr, true, true);
  EXPECT_EQ(shipped, default_config_json());
  const auto synthetic = load_config(kSource + "/configs/synthetic.json");
  EXPECT_EQ(synthetic.encoder.backend_id, "toy");
  EXPECT_TRUE(synthetic.offline);
}

TEST_F(ExperimentTest, OverridesAndHash) {
  auto tree = default_config_json();
  apply_override(tree, "train.DS-sup.epochs=3");
  apply_override(tree, "method.variant=sup");
  apply_override(tree, "new.nested.key=[1,2]");
  EXPECT_EQ(tree["train"]["DS-sup"]["epochs"], 3);
  EXPECT_EQ(tree["method"]["variant"], "sup");
  EXPECT_EQ(tree["new"]["nested"]["key"], nlohmann::json({1, 2}));
  EXPECT_THROW(apply_override(tree, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(tree, "a..b=1"), ConfigError);
  EXPECT_THROW(apply_override(tree, "offline.x=1"), ConfigError);

  const auto a = load_config("", {"method.variant=sup"});
  EXPECT_EQ(a.method_key(), "DS-sup");
  EXPECT_EQ(a.train.lambda_cl, 1.0);
  // Seeds and output location do not change the hash; hyperparameters do.
  EXPECT_EQ(load_config("", {"method.variant=sup", "output_dir=elsewhere"}, 9).hash, a.hash);
  EXPECT_NE(load_config("", {"method.variant=sup", "train.DS-sup.margin=0.5"}).hash, a.hash);
  EXPECT_EQ(load_config("", {}, 9).seeds, std::vector<std::uint64_t>{9});

  EXPECT_THROW(load_config("", {"method.family=XX"}), ConfigError);
  EXPECT_THROW(load_config("", {"method.family=IS", "method.variant=sup"}), ConfigError);
  EXPECT_THROW(load_config("", {"split.seeds=[]"}), ConfigError);
  EXPECT_THROW(load_config("", {"offline=true", "encoder.backend_id=http"}), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST_F(ExperimentTest, PrepareTinyFixture) {
  const auto out = scratch("prepare");
  const auto c = tiny_config(out);
  cmd_prepare(c);
  const auto report = read_json_file(out / "data_report.json");
  EXPECT_EQ(report["config_hash"], c.hash);
  EXPECT_EQ(report["records"], 18);
  EXPECT_EQ(report["corpus_size"], 6);
  ASSERT_EQ(report["values"].size(), 2u);
  // Hand tally: A2 and A4 split on column 0, A3 and A4 on column 1.
  for (const auto& v : report["values"]) {
    EXPECT_EQ(v["subjective"], 2);
    EXPECT_EQ(v["non_subjective"], 4);
    EXPECT_EQ(v["total"], 6);
    EXPECT_DOUBLE_EQ(v["ratio"].get<double>(), 0.5);
    // Pbar = 7/9, Pe = 85/162.
    EXPECT_NEAR(v["fleiss_kappa"].get<double>(), 41.0 / 77.0, 1e-12);
    EXPECT_EQ(v["kappa_band"], "moderate");
  }
  EXPECT_EQ(report["values"][0]["column"], 0);
  EXPECT_EQ(report["values"][1]["column"], 1);
  EXPECT_EQ(report["splits"].size(), 2u);

  const auto cache = corpus_cache_path(c);
  const auto first = slurp(cache);
  const auto first_report = slurp(out / "data_report.json");
  cmd_prepare(c);
  EXPECT_EQ(slurp(cache), first);
  EXPECT_EQ(slurp(out / "data_report.json"), first_report);

  setenv(kCacheDirEnv, (out / "elsewhere").c_str(), 1);
  const auto moved = tiny_config(out);
  EXPECT_EQ(corpus_cache_path(moved).parent_path(), out / "elsewhere");
  unsetenv(kCacheDirEnv);
}

TEST_F(ExperimentTest, PrepareReportsParseErrorsWithLocation) {
  const auto out = scratch("bad_input");
  {
    std::ofstream f(out / "bad.tsv");
    f << "Argument ID\tWorker ID\tPremise\tLabels\nA1\tW1\ttext\t[1, 0]\nA1\tW2\ttext\t[1, 0, 1]\n";
  }
  const auto c = load_config("", {"data.input=" + (out / "bad.tsv").string(), "output_dir=" + out.string()});
  try {
    cmd_prepare(c);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.tsv:3"), std::string::npos) << e.what();
  }
}

TEST_F(ExperimentTest, TrainEvaluateStructure) {
  const auto out = scratch("train");
  const auto c = tiny_config(out, {"method.variant=sup"});
  cmd_prepare(c);
  const auto result = cmd_train(c);
  EXPECT_TRUE(result.ok());
  for (std::uint64_t seed : {1, 2}) {
    const auto dir = run_dir(c, seed);
    EXPECT_TRUE(fs::exists(dir / "value_0.ckpt"));
    EXPECT_TRUE(fs::exists(dir / "value_1.ckpt"));
    const auto manifest = read_json_file(dir / "manifest.json");
    EXPECT_EQ(manifest["status"], "complete");
    EXPECT_EQ(manifest["config_hash"], c.hash);
    EXPECT_EQ(manifest["seed"], seed);
    EXPECT_EQ(manifest["checkpoints"].size(), 2u);
    EXPECT_EQ(manifest["decisions"]["temperature"], 0.1);
    EXPECT_EQ(manifest["decisions"]["positive_policy"], "dropout");
    const auto losses = slurp(dir / "losses.csv");
    EXPECT_EQ(losses.substr(0, losses.find('\n') + 1), losses_csv_header());
    // 2 values x 5 epochs.
    EXPECT_EQ(std::count(losses.begin(), losses.end(), '\n'), 11);
    EXPECT_NE(losses.find(c.hash), std::string::npos);
  }

  cmd_evaluate(c);
  const auto metrics = read_json_file(eval_dir(c) / "metrics.json");
  EXPECT_EQ(metrics["config_hash"], c.hash);
  EXPECT_EQ(metrics["seeds"], nlohmann::json({1, 2}));
  EXPECT_EQ(metrics["runs"].size(), 2u);
  EXPECT_EQ(metrics["result"]["runs"], 2);
  EXPECT_TRUE(metrics["result"].contains("macro_std"));
  EXPECT_EQ(metrics["baseline"]["method"], "baseline-random");
  const auto table = slurp(eval_dir(c) / "metrics_table.csv");
  EXPECT_NE(table.find("±"), std::string::npos);
  EXPECT_NE(table.find(c.hash), std::string::npos);
  EXPECT_NE(slurp(eval_dir(c) / "metrics.csv").find(c.hash), std::string::npos);

  cmd_baseline(c);
  EXPECT_TRUE(fs::exists(out / "baseline" / "metrics.json"));
  EXPECT_EQ(read_json_file(out / "baseline" / "metrics.json")["config_hash"], c.hash);
}

TEST_F(ExperimentTest, EvaluateRefusesMixedHashes) {
  const auto out = scratch("mixed");
  const auto a = tiny_config(out, {"split.seeds=[1]"});
  const auto b = tiny_config(out, {"split.seeds=[2]", "method.threshold=0.6"});
  ASSERT_NE(a.hash, b.hash);
  cmd_prepare(a);
  cmd_train(a);
  cmd_train(b);
  const auto both = tiny_config(out, {"split.seeds=[1,2]"});
  EXPECT_EQ(both.hash, a.hash);
  try {
    cmd_evaluate(both);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("checkpoint/config mismatch"), std::string::npos);
  }
  // A checkpoint copied in from another configuration is refused too.
  fs::copy_file(run_dir(b, 2) / "value_0.ckpt", run_dir(a, 1) / "value_0.ckpt", fs::copy_options::overwrite_existing);
  EXPECT_THROW(cmd_evaluate(a), ConfigError);
}

TEST_F(ExperimentTest, PerfectPredictionsScoreOne) {
  const std::vector<std::vector<std::uint8_t>> gold{{1, 0, 1, 0}, {0, 1, 1, 0}};
  const auto r = make_report("DS-simple", {"a", "b"}, gold, gold, {0.3, 0.6});
  for (const auto& v : r.per_value) {
    EXPECT_EQ(v.precision, 1.0);
    EXPECT_EQ(v.recall, 1.0);
    EXPECT_EQ(v.f1, 1.0);
  }
  EXPECT_EQ(r.macro.f1, 1.0);
}

TEST_F(ExperimentTest, InferFamilyWritesOneCheckpointPerAnnotator) {
  const auto out = scratch("is_each");
  const auto input = write_synthetic(out, 80);
  auto c = synthetic_config(out, input, {"method.family=IS", "method.variant=each", "train.IS.epochs=2"});
  cmd_prepare(c);
  EXPECT_TRUE(cmd_train(c).ok());
  const auto dir = run_dir(c, 1);
  for (const char* who : {"W001", "W002", "W003", "W004"}) {
    EXPECT_TRUE(fs::exists(dir / (std::string("annotator_") + who + ".ckpt"))) << who;
  }
  EXPECT_EQ(read_json_file(dir / "manifest.json")["checkpoints"].size(), 4u);
  cmd_evaluate(c);
  const auto metrics = read_json_file(eval_dir(c) / "metrics.json");
  EXPECT_EQ(metrics["family"], "IS");
  ASSERT_EQ(metrics["annotator_metrics"].size(), 1u);
  EXPECT_EQ(metrics["annotator_metrics"][0]["annotators"].size(), 4u);
  EXPECT_EQ(metrics["annotator_metrics"][0]["annotators"][0]["per_value"].size(), 4u);
  const auto table = slurp(eval_dir(c) / "annotator_predictions_seed_1.tsv");
  const auto test_rows = split_for(c, load_prepared_corpus(c), 1).test.size();
  // Comment, header, then one row per (argument, annotator, value).
  EXPECT_EQ(static_cast<std::size_t>(std::count(table.begin(), table.end(), '\n')), 2 + test_rows * 4 * 4);
  EXPECT_NE(table.find("argument_id\tannotator_id\tvalue\tprediction\tgold\n"), std::string::npos);

  ExportOptions o;
  o.annotator = "W003";
  const auto corpus = load_prepared_corpus(c);
  const auto t = compute_embeddings(c, corpus, o);
  EXPECT_EQ(t.embeddings.cols(), 32);
  o.annotator = "W777";
  EXPECT_THROW(compute_embeddings(c, corpus, o), ConfigError);
}

TEST_F(ExperimentTest, ExportEmbeddingsShapeAndSeparability) {
  const auto out = scratch("export");
  const auto input = write_synthetic(out, 300);
  const auto c = synthetic_config(out, input, {"method.variant=sup"});
  cmd_prepare(c);
  ASSERT_TRUE(cmd_train(c).ok());
  ExportOptions o;
  o.value = 1;
  const auto result = cmd_export_embeddings(c, o);
  ASSERT_EQ(result.written.size(), 1u);
  const auto text = slurp(result.written[0]);
  std::istringstream lines(text);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line.rfind("# config_hash=" + c.hash, 0), 0u);
  std::getline(lines, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t') + 1, 2 + 32 + 2);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t') + 1, 2 + 32 + 2);
  }
  const auto corpus = load_prepared_corpus(c);
  const auto split = split_for(c, corpus, 1);
  EXPECT_EQ(rows, split.test.size());
  EXPECT_EQ(slurp(result.written[0]), text);
  cmd_export_embeddings(c, o);
  EXPECT_EQ(slurp(result.written[0]), text);

  // A single threshold on one projected axis separates the classes.
  const auto t = compute_embeddings(c, corpus, o);
  double best = 0.0;
  for (Eigen::Index axis = 0; axis < 2; ++axis) {
    for (Eigen::Index i = 0; i < t.projection.rows(); ++i) {
      const double cut = t.projection(i, axis);
      std::size_t above_pos = 0, above_neg = 0, pos = 0;
      for (Eigen::Index r = 0; r < t.projection.rows(); ++r) {
        const bool above = t.projection(r, axis) > cut;
        const bool y = t.labels[static_cast<std::size_t>(r)];
        pos += y;
        above_pos += above && y;
        above_neg += above && !y;
      }
      const double n = static_cast<double>(t.labels.size());
      const double acc_up = (above_pos + (n - pos - above_neg)) / n;
      best = std::max({best, acc_up, 1.0 - acc_up});
    }
  }
  EXPECT_GE(best, 0.9);

  o.projection = false;
  o.out = (out / "plain.tsv").string();
  cmd_export_embeddings(c, o);
  std::istringstream plain(slurp(out / "plain.tsv"));
  std::getline(plain, line);
  std::getline(plain, line);
  EXPECT_EQ(std::count(line.begin(), line.end(), '\t') + 1, 2 + 32);
  o.value = 9;
  EXPECT_THROW(cmd_export_embeddings(c, o), ConfigError);
}

TEST_F(ExperimentTest, CommandLineRoundTrip) {
  const auto out = scratch("cli");
  const std::string cli = SUBJLAB_CLI;
  const auto input = out / "syn.tsv";
  ASSERT_EQ(std::system((cli + " synth --out " + input.string() + " --arguments 60 2>/dev/null").c_str()), 0);
  const auto cfg = out / "config.json";
  {
    std::ofstream f(cfg);
    f << "// test config\n{\"data\": {\"input\": \"" << input.string() << "\", \"value_k\": 4}, \"output_dir\": \""
      << out.string() << "\", \"split\": {\"seeds\": [1, 2]}, \"offline\": true}\n";
  }
  const auto run = [&](const std::string& args) {
    return std::system((cli + " " + args + " --config " + cfg.string() + " --quiet 2>/dev/null").c_str());
  };
  EXPECT_EQ(run("prepare"), 0);
  EXPECT_EQ(run("train --set train.DS-simple.epochs=1"), 0);
  EXPECT_EQ(run("evaluate --set train.DS-simple.epochs=1"), 0);
  EXPECT_TRUE(fs::exists(out / "eval" / "DS-simple" / "metrics.json"));
  // Evaluating under a different configuration is refused.
  EXPECT_NE(run("evaluate --set train.DS-simple.epochs=2"), 0);
  EXPECT_EQ(run("baseline --seed 3"), 0);
  EXPECT_EQ(run("export-embeddings --seed 2 --part all --set train.DS-simple.epochs=1"), 0);
  EXPECT_TRUE(fs::exists(out / "runs" / "seed_2" / "DS-simple" / "embeddings_all_value0.tsv"));
  EXPECT_NE(run("frobnicate"), 0);
  EXPECT_NE(std::system((cli + " prepare --config /does/not/exist 2>/dev/null").c_str()), 0);
}

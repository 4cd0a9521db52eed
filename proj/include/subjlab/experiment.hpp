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

// Config-driven experiment runner behind the `subjlab` command.
//
// Layout under output_dir:
//   data_report.json
//   cache/corpus-<data hash>.cache        (or $SUBJLAB_CACHE_DIR)
//   runs/seed_<s>/<family>-<variant>/     checkpoints, losses.csv, manifest.json
//   eval/<family>-<variant>/              metrics.json, metrics.csv, metrics_table.csv
//   baseline/                             same three files for the random baseline

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "subjlab/corpus.hpp"
#include "subjlab/direct_subjectivity.hpp"
#include "subjlab/encoder.hpp"
#include "subjlab/error.hpp"
#include "subjlab/evaluation.hpp"
#include "subjlab/infer_subjectivity.hpp"
#include "subjlab/paraphrase.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

namespace fs = std::filesystem;

inline constexpr const char* kCacheDirEnv = "SUBJLAB_CACHE_DIR";
inline constexpr const char* kOfflineEnv = "SUBJLAB_OFFLINE";

// ---------------------------------------------------------------------------
// Configuration

inline nlohmann::json default_config_json() {
  using nlohmann::json;
  TrainConfig is_train;
  auto method_train = [](DSVariant v) { return to_json(default_ds_train_config(v)); };
  const DecodeParams decode;
  return json{
      {"data",
       {{"input", "data/annotations.tsv"},
        {"delimiter", "\t"},
        {"taxonomy_size", nullptr},
        {"auto_header", true},
        {"value_names", json::array()},
        {"annotator_k", 4},
        {"value_k", 8}}},
      {"split",
       {{"train", 0.78},
        {"test", 0.22},
        {"val_of_train", 0.10},
        {"seeds", {1, 2, 3, 4, 5}},
        {"fixed_test", true},
        {"test_seed", 20240101},
        {"stratify_value", nullptr}}},
      {"method",
       {{"family", "DS"},
        {"variant", "simple"},
        {"values", json::array()},
        {"threshold", 0.5},
        {"tune_threshold", false},
        {"annotator_token_format", kDefaultAnnotatorTokenFormat},
        {"positive_policy", "dropout"}}},
      {"encoder", to_json(EncoderConfig{})},
      {"train",
       {{"IS", to_json(is_train)},
        {"DS-simple", method_train(DSVariant::kSimple)},
        {"DS-sup", method_train(DSVariant::kSup)},
        {"DS-unsup", method_train(DSVariant::kUnsup)}}},
      {"augment",
       {{"enabled", false},
        {"client", "word-dropout"},
        {"url", "http://127.0.0.1:8098"},
        {"path", "/paraphrase"},
        {"command", ""},
        {"timeout_seconds", 30.0},
        {"candidates_per_request", 1},
        {"decode",
         {{"sampling_method", decode.sampling_method},
          {"temperature", decode.temperature},
          {"top_k", decode.top_k},
          {"top_p", decode.top_p},
          {"repetition_penalty", decode.repetition_penalty}}}}},
      {"output_dir", "runs/default"},
      {"offline", false}};
}

// Parses the right-hand side of --set: JSON when it parses, otherwise a bare
// string.
inline nlohmann::json parse_override_value(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return nlohmann::json(text);
  }
}

// Applies "a.b.c=value", creating intermediate objects.
inline void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  nlohmann::json* node = &config;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override key '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + path + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = parse_override_value(assignment.substr(eq + 1));
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = nlohmann::json::object();
    start = dot + 1;
  }
}

struct ExperimentConfig {
  // Fully resolved tree (defaults + file + overrides).
  nlohmann::json tree;
  std::string hash;

  std::string input;
  FormatConfig format;
  std::vector<std::string> value_names;
  std::size_t annotator_k = 4;
  std::size_t value_k = 8;

  SplitFractions fractions;
  std::vector<std::uint64_t> seeds;
  bool fixed_test = true;
  std::uint64_t test_seed = 20240101;
  std::optional<std::size_t> stratify_value;

  std::string family = "DS";
  std::string variant = "simple";
  nlohmann::json value_set = nlohmann::json::array();
  double threshold = 0.5;
  bool tune_threshold = false;
  std::string annotator_token_format = kDefaultAnnotatorTokenFormat;
  PositivePolicy positive_policy = PositivePolicy::kDropout;

  EncoderConfig encoder;
  TrainConfig train;

  bool augment = false;
  std::string paraphrase_client = "word-dropout";
  std::string paraphrase_url;
  std::string paraphrase_path;
  std::string paraphrase_command;
  double paraphrase_timeout = 30.0;
  AugmentOptions augment_options;

  std::string output_dir;
  bool offline = false;
  std::string cache_dir;

  std::string method_key() const { return family + "-" + variant; }
  std::string train_key() const { return family == "IS" ? "IS" : method_key(); }
};

// Hash of the canonical serialization, ignoring the seed list and the output
// location so that runs of one experiment share it.
inline std::string config_hash(const nlohmann::json& tree) {
  nlohmann::json copy = tree;
  if (copy.contains("split")) copy["split"].erase("seeds");
  copy.erase("output_dir");
  return hex64(fnv1a64(copy.dump()));
}

namespace detail {

inline const nlohmann::json& section(const nlohmann::json& tree, const char* name) {
  if (!tree.contains(name) || !tree[name].is_object()) {
    throw ConfigError(std::string("config section '") + name + "' is missing");
  }
  return tree[name];
}

template <typename T>
T get(const nlohmann::json& j, const char* key, const char* where) {
  if (!j.contains(key)) throw ConfigError(std::string("config key ") + where + "." + key + " is missing");
  try {
    return j[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key ") + where + "." + key + " has the wrong type");
  }
}

inline std::optional<std::size_t> opt_size(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_number_unsigned() && !(j[key].is_number_integer() && j[key].get<long long>() >= 0)) {
    throw ConfigError(std::string("config key ") + key + " must be a non-negative integer or null");
  }
  return j[key].get<std::size_t>();
}

inline bool env_flag(const char* name) {
  const char* v = std::getenv(name);
  if (!v) return false;
  const std::string s(v);
  return !(s.empty() || s == "0" || s == "false" || s == "no");
}

}  // namespace detail

inline ExperimentConfig resolve_config(nlohmann::json tree) {
  using detail::get;
  ExperimentConfig c;
  const auto& data = detail::section(tree, "data");
  c.input = get<std::string>(data, "input", "data");
  const auto delim = get<std::string>(data, "delimiter", "data");
  if (delim.size() != 1) throw ConfigError("data.delimiter must be a single character");
  c.format.delimiter = delim[0];
  c.format.taxonomy_size = detail::opt_size(data, "taxonomy_size");
  c.format.auto_header = get<bool>(data, "auto_header", "data");
  c.value_names = get<std::vector<std::string>>(data, "value_names", "data");
  c.annotator_k = get<std::size_t>(data, "annotator_k", "data");
  c.value_k = get<std::size_t>(data, "value_k", "data");

  const auto& split = detail::section(tree, "split");
  c.fractions.train = get<double>(split, "train", "split");
  c.fractions.test = get<double>(split, "test", "split");
  c.fractions.val_of_train = get<double>(split, "val_of_train", "split");
  c.seeds = get<std::vector<std::uint64_t>>(split, "seeds", "split");
  if (c.seeds.empty()) throw ConfigError("split.seeds must not be empty");
  c.fixed_test = get<bool>(split, "fixed_test", "split");
  c.test_seed = get<std::uint64_t>(split, "test_seed", "split");
  c.stratify_value = detail::opt_size(split, "stratify_value");

  const auto& method = detail::section(tree, "method");
  c.family = get<std::string>(method, "family", "method");
  c.variant = get<std::string>(method, "variant", "method");
  if (c.family == "IS") {
    parse_is_variant(c.variant);
  } else if (c.family == "DS") {
    parse_ds_variant(c.variant);
  } else {
    throw ConfigError("method.family must be IS or DS, got '" + c.family + "'");
  }
  c.value_set = method.contains("values") ? method["values"] : nlohmann::json::array();
  if (!c.value_set.is_array()) throw ConfigError("method.values must be a list");
  c.threshold = get<double>(method, "threshold", "method");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("method.threshold must lie in (0, 1)");
  c.tune_threshold = get<bool>(method, "tune_threshold", "method");
  c.annotator_token_format = get<std::string>(method, "annotator_token_format", "method");
  c.positive_policy = parse_positive_policy(get<std::string>(method, "positive_policy", "method"));

  c.encoder = encoder_config_from_json(detail::section(tree, "encoder"));
  const auto& train = detail::section(tree, "train");
  if (!train.contains(c.train_key())) throw ConfigError("train." + c.train_key() + " is missing");
  c.train = train_config_from_json(train[c.train_key()]);

  const auto& aug = detail::section(tree, "augment");
  c.augment = get<bool>(aug, "enabled", "augment");
  c.paraphrase_client = get<std::string>(aug, "client", "augment");
  if (c.paraphrase_client != "word-dropout" && c.paraphrase_client != "http" &&
      c.paraphrase_client != "subprocess") {
    throw ConfigError("augment.client must be word-dropout, http or subprocess");
  }
  c.paraphrase_url = get<std::string>(aug, "url", "augment");
  c.paraphrase_path = get<std::string>(aug, "path", "augment");
  c.paraphrase_command = get<std::string>(aug, "command", "augment");
  c.paraphrase_timeout = get<double>(aug, "timeout_seconds", "augment");
  c.augment_options.candidates_per_request = get<std::size_t>(aug, "candidates_per_request", "augment");
  const auto& decode = detail::section(aug, "decode");
  c.augment_options.decode.sampling_method = get<std::string>(decode, "sampling_method", "augment.decode");
  c.augment_options.decode.temperature = get<double>(decode, "temperature", "augment.decode");
  c.augment_options.decode.top_k = get<int>(decode, "top_k", "augment.decode");
  c.augment_options.decode.top_p = get<double>(decode, "top_p", "augment.decode");
  c.augment_options.decode.repetition_penalty = get<double>(decode, "repetition_penalty", "augment.decode");

  c.output_dir = get<std::string>(tree, "output_dir", "<root>");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  c.offline = get<bool>(tree, "offline", "<root>") || detail::env_flag(kOfflineEnv);
  if (c.offline && c.encoder.backend_id != "toy") {
    throw ConfigError("offline mode only permits the toy encoder backend, not '" + c.encoder.backend_id + "'");
  }
  const char* cache_env = std::getenv(kCacheDirEnv);
  c.cache_dir = (cache_env && *cache_env) ? std::string(cache_env) : (fs::path(c.output_dir) / "cache").string();

  c.hash = config_hash(tree);
  c.tree = std::move(tree);
  return c;
}

// Defaults, then the file (JSON merge patch), then --set overrides, then
// --seed which replaces the seed list.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {},
                                    std::optional<std::uint64_t> seed = std::nullopt) {
  nlohmann::json tree = default_config_json();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    if (!file.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
    tree.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(tree, o);
  if (seed) tree["split"]["seeds"] = nlohmann::json::array({*seed});
  return resolve_config(std::move(tree));
}

// ---------------------------------------------------------------------------
// Shared plumbing

struct CommandResult {
  std::vector<std::string> written;
  std::vector<std::string> warnings;
  // Seeds whose training diverged or failed.
  std::vector<std::uint64_t> failed_seeds;
  bool ok() const { return failed_seeds.empty(); }
};

using LogSink = std::function<void(const std::string&)>;

inline void write_text_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
  if (!out) throw Error("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline fs::path corpus_cache_path(const ExperimentConfig& c) {
  return fs::path(c.cache_dir) / ("corpus-" + hex64(fnv1a64(c.tree.at("data").dump())) + ".cache");
}

inline fs::path run_dir(const ExperimentConfig& c, std::uint64_t seed) {
  return fs::path(c.output_dir) / "runs" / ("seed_" + std::to_string(seed)) / c.method_key();
}

inline fs::path eval_dir(const ExperimentConfig& c) { return fs::path(c.output_dir) / "eval" / c.method_key(); }

inline SplitSpec split_for(const ExperimentConfig& c, const Corpus& corpus, std::uint64_t seed) {
  SplitOptions opts;
  opts.fractions = c.fractions;
  opts.seed = seed;
  opts.fixed_test = c.fixed_test;
  opts.test_seed = c.test_seed;
  opts.stratify_value = c.stratify_value;
  return make_splits(corpus, opts);
}

inline Corpus load_prepared_corpus(const ExperimentConfig& c) {
  const auto path = corpus_cache_path(c);
  if (!fs::exists(path)) throw Error("corpus cache " + path.string() + " not found; run `subjlab prepare` first");
  return load_corpus_file(path.string());
}

// Indices (into the corpus value list) selected by method.values: names or
// positions; empty means all.
inline std::vector<std::size_t> selected_values(const ExperimentConfig& c, const Corpus& corpus) {
  std::vector<std::size_t> out;
  if (c.value_set.empty()) {
    for (std::size_t v = 0; v < corpus.n_values(); ++v) out.push_back(v);
    return out;
  }
  for (const auto& entry : c.value_set) {
    std::size_t v = 0;
    if (entry.is_number_unsigned() || entry.is_number_integer()) {
      const auto i = entry.get<long long>();
      if (i < 0 || static_cast<std::size_t>(i) >= corpus.n_values()) {
        throw ConfigError("method.values index " + std::to_string(i) + " out of range");
      }
      v = static_cast<std::size_t>(i);
    } else if (entry.is_string()) {
      const auto name = entry.get<std::string>();
      const auto it = std::find(corpus.values.names.begin(), corpus.values.names.end(), name);
      if (it == corpus.values.names.end()) throw ConfigError("method.values names unknown value '" + name + "'");
      v = static_cast<std::size_t>(it - corpus.values.names.begin());
    } else {
      throw ConfigError("method.values entries must be names or indices");
    }
    if (std::find(out.begin(), out.end(), v) != out.end()) throw ConfigError("method.values lists a value twice");
    out.push_back(v);
  }
  return out;
}

inline std::unique_ptr<ParaphraseClient> make_paraphraser(const ExperimentConfig& c, std::uint64_t seed,
                                                          std::vector<std::string>* warnings) {
  if (c.paraphrase_client == "word-dropout") return std::make_unique<WordDropoutParaphraser>(seed);
  if (c.offline) {
    if (warnings) warnings->push_back("offline: paraphrase client '" + c.paraphrase_client + "' replaced by word-dropout");
    return std::make_unique<WordDropoutParaphraser>(seed);
  }
  if (c.paraphrase_client == "http") {
    return std::make_unique<HttpParaphraseClient>(c.paraphrase_url, c.paraphrase_path, c.paraphrase_timeout);
  }
  if (c.paraphrase_command.empty()) throw ConfigError("augment.command is empty for the subprocess client");
  return std::make_unique<SubprocessParaphraseClient>(c.paraphrase_command);
}

inline std::string sanitize_file_component(const std::string& s) {
  std::string out;
  for (unsigned char ch : s) out += (std::isalnum(ch) || ch == '-' || ch == '_' || ch == '.') ? char(ch) : '_';
  return out;
}

inline double ratio_or_nan(const Corpus& corpus, std::size_t v) {
  try {
    return subjectivity_ratio(corpus, v);
  } catch (const UndefinedError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

inline const char* subjectivity_word(std::uint8_t bit) { return bit ? "subjective" : "non-subjective"; }

// ---------------------------------------------------------------------------
// prepare

inline Corpus build_corpus_from_config(const ExperimentConfig& c, std::size_t* n_records = nullptr) {
  const auto records = parse_annotation_file(c.input, c.format);
  if (n_records) *n_records = records.size();
  const auto annotators = select_annotators(records, c.annotator_k);
  const auto values = select_values(records, annotators, c.value_k, c.value_names);
  return build_corpus(records, annotators, values);
}

inline nlohmann::json data_report(const ExperimentConfig& c, const Corpus& corpus, std::size_t n_records) {
  using nlohmann::json;
  json report;
  report["config_hash"] = c.hash;
  report["input"] = c.input;
  report["records"] = n_records;
  report["corpus_size"] = corpus.size();
  report["annotators"] = corpus.annotator_ids;
  report["positive_class"] = "subjective";
  json values = json::array();
  for (std::size_t v = 0; v < corpus.n_values(); ++v) {
    const auto s = corpus.count_subjective(v);
    json e{{"value", corpus.values.names[v]},
           {"column", corpus.values.indices[v]},
           {"subjective", s},
           {"non_subjective", corpus.size() - s},
           {"total", corpus.size()}};
    const double ratio = ratio_or_nan(corpus, v);
    e["ratio"] = std::isfinite(ratio) ? json(ratio) : json(nullptr);
    const auto kappa = fleiss_kappa(corpus, v);
    e["fleiss_kappa"] = kappa ? json(*kappa) : json(nullptr);
    e["kappa_band"] = kappa ? json(kappa_band(*kappa)) : json("undefined");
    values.push_back(e);
  }
  report["values"] = values;
  json splits = json::array();
  for (auto seed : c.seeds) {
    const auto split = split_for(c, corpus, seed);
    splits.push_back({{"seed", seed}, {"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}});
  }
  report["splits"] = splits;
  report["fixed_test"] = c.fixed_test;
  report["test_seed"] = c.test_seed;
  return report;
}

inline CommandResult cmd_prepare(const ExperimentConfig& c, const LogSink& log = {}) {
  CommandResult result;
  std::size_t n_records = 0;
  const auto corpus = build_corpus_from_config(c, &n_records);
  const auto cache = corpus_cache_path(c);
  fs::create_directories(cache.parent_path());
  save_corpus_file(corpus, cache.string());
  result.written.push_back(cache.string());
  const auto report_path = fs::path(c.output_dir) / "data_report.json";
  write_text_file(report_path, dump_json(data_report(c, corpus, n_records)));
  result.written.push_back(report_path.string());
  if (log) {
    log("prepared " + std::to_string(corpus.size()) + " arguments, " + std::to_string(corpus.n_annotators()) +
        " annotators, " + std::to_string(corpus.n_values()) + " values");
  }
  return result;
}

// ---------------------------------------------------------------------------
// train

inline std::string losses_csv_header() { return "model,epoch,bce,cl,lambda,total,val_loss,skipped_cl_batches,config_hash\n"; }

inline std::string losses_csv_row(const EpochRecord& r, double lambda, const std::string& hash) {
  std::ostringstream out;
  out << csv_escape(r.model) << "," << r.epoch << "," << format_double(r.bce) << "," << format_double(r.cl) << ","
      << format_double(lambda) << "," << format_double(r.total) << ","
      << (r.val_loss ? format_double(*r.val_loss) : std::string()) << "," << r.skipped_cl_batches << "," << hash
      << "\n";
  return out.str();
}

inline nlohmann::json run_manifest(const ExperimentConfig& c, std::uint64_t seed, const EncoderConfig& enc,
                                   const TrainConfig& train) {
  nlohmann::json m;
  m["config_hash"] = c.hash;
  m["family"] = c.family;
  m["variant"] = c.variant;
  m["seed"] = seed;
  m["encoder"] = to_json(enc);
  m["train"] = to_json(train);
  m["decisions"] = {{"temperature", train.temperature},
                    {"positive_policy", to_string(c.positive_policy)},
                    {"threshold", c.threshold},
                    {"tune_threshold", c.tune_threshold},
                    {"triplet_distance", "euclidean-on-unit-vectors"},
                    {"annotator_token_format", c.annotator_token_format},
                    {"positive_class", "subjective"},
                    {"augment", c.augment},
                    {"paraphrase_client", c.paraphrase_client}};
  m["split"] = {{"fixed_test", c.fixed_test}, {"test_seed", c.test_seed}};
  m["config"] = c.tree;
  return m;
}

// Trains the configured method for one seed into run_dir(c, seed).
inline void train_one_seed(const ExperimentConfig& c, const Corpus& corpus, std::uint64_t seed, CommandResult& result,
                           const LogSink& log) {
  const auto dir = run_dir(c, seed);
  fs::create_directories(dir);
  EncoderConfig enc = c.encoder;
  enc.seed = seed;
  TrainConfig train = c.train;
  train.seed = seed;
  const auto split = split_for(c, corpus, seed);
  auto manifest = run_manifest(c, seed, enc, train);
  manifest["split"]["sizes"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
  manifest["status"] = "running";
  manifest["checkpoints"] = nlohmann::json::array();
  std::string losses = losses_csv_header();
  std::vector<std::string> warnings;
  nlohmann::json ckpt_meta{{"config_hash", c.hash}, {"seed", seed}};

  const auto flush = [&](const std::string& status) {
    manifest["status"] = status;
    manifest["warnings"] = warnings;
    write_text_file(dir / "losses.csv", losses);
    write_text_file(dir / "manifest.json", dump_json(manifest));
  };

  try {
    if (c.family == "DS") {
      const auto variant = parse_ds_variant(c.variant);
      auto paraphraser = make_paraphraser(c, mix64(seed) ^ 0xa06ULL, &warnings);
      DSOptions options;
      options.positive_policy = c.positive_policy;
      options.augment = c.augment;
      options.paraphraser = paraphraser.get();
      options.augment_options = c.augment_options;
      options.augment_options.seed = seed;
      options.threshold = c.threshold;
      options.tune_threshold = c.tune_threshold;
      for (auto v : selected_values(c, corpus)) {
        auto ds = train_ds(corpus, split, v, variant, enc, train, options);
        for (const auto& rec : ds.log) losses += losses_csv_row(rec, train.lambda_cl, c.hash);
        for (const auto& w : ds.warnings) warnings.push_back(w);
        const auto name = "value_" + std::to_string(v) + ".ckpt";
        write_checkpoint_file((dir / name).string(), ds_checkpoint(ds, ckpt_meta));
        manifest["checkpoints"].push_back({{"file", name}, {"value_index", v}, {"value_name", ds.value_name},
                                           {"threshold", ds.threshold}});
        result.written.push_back((dir / name).string());
        if (log) log("seed " + std::to_string(seed) + ": trained " + c.method_key() + " for " + ds.value_name);
      }
    } else {
      ISOptions options;
      options.annotator_token_format = c.annotator_token_format;
      options.threshold = c.threshold;
      options.tune_threshold = c.tune_threshold;
      const auto bundle = train_is(corpus, split, parse_is_variant(c.variant), enc, train, options);
      for (const auto& rec : bundle.log) losses += losses_csv_row(rec, train.lambda_cl, c.hash);
      const auto ckpts = bundle_checkpoints(bundle, ckpt_meta);
      for (std::size_t i = 0; i < ckpts.size(); ++i) {
        const auto name = bundle.variant == ISVariant::kEach
                              ? "annotator_" + sanitize_file_component(bundle.annotator_ids[i]) + ".ckpt"
                              : std::string("model.ckpt");
        write_checkpoint_file((dir / name).string(), ckpts[i]);
        manifest["checkpoints"].push_back({{"file", name}, {"model_index", i}});
        result.written.push_back((dir / name).string());
      }
      manifest["decisions"]["threshold"] = bundle.threshold;
      if (log) log("seed " + std::to_string(seed) + ": trained " + c.method_key());
    }
  } catch (const DivergenceError& e) {
    warnings.push_back("seed " + std::to_string(seed) + ": " + e.what());
    manifest["error"] = std::string(e.what());
    flush("diverged");
    result.failed_seeds.push_back(seed);
    result.warnings.push_back("seed " + std::to_string(seed) + " diverged: " + e.what());
    return;
  }
  flush("complete");
  result.written.push_back((dir / "losses.csv").string());
  result.written.push_back((dir / "manifest.json").string());
  result.warnings.insert(result.warnings.end(), warnings.begin(), warnings.end());
}

inline CommandResult cmd_train(const ExperimentConfig& c, const LogSink& log = {}) {
  CommandResult result;
  const auto corpus = load_prepared_corpus(c);
  for (auto seed : c.seeds) train_one_seed(c, corpus, seed, result, log);
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

namespace detail {

inline nlohmann::json load_run_manifest(const ExperimentConfig& c, std::uint64_t seed) {
  const auto path = run_dir(c, seed) / "manifest.json";
  if (!fs::exists(path)) throw Error("no trained run for seed " + std::to_string(seed) + " at " + path.string());
  auto manifest = read_json_file(path);
  if (manifest.value("config_hash", "") != c.hash) {
    throw ConfigError("checkpoint/config mismatch: " + path.string() + " has config hash " +
                      manifest.value("config_hash", "?") + ", current config is " + c.hash);
  }
  if (manifest.value("status", "") != "complete") {
    throw Error("run for seed " + std::to_string(seed) + " is " + manifest.value("status", "unknown"));
  }
  return manifest;
}

inline Checkpoint load_checked_checkpoint(const ExperimentConfig& c, const fs::path& path) {
  auto ckpt = read_checkpoint_file(path.string());
  if (ckpt.meta.value("config_hash", "") != c.hash) {
    throw ConfigError("checkpoint/config mismatch: " + path.string() + " was written under config hash " +
                      ckpt.meta.value("config_hash", "?"));
  }
  return ckpt;
}

inline std::vector<std::string> texts_of(const Corpus& corpus, const std::vector<std::size_t>& rows) {
  std::vector<std::string> out;
  for (auto r : rows) out.push_back(corpus.texts[r]);
  return out;
}

inline std::vector<std::uint8_t> gold_of(const Corpus& corpus, const std::vector<std::size_t>& rows, std::size_t v) {
  std::vector<std::uint8_t> out;
  for (auto r : rows) out.push_back(corpus.subjective(r, v));
  return out;
}

inline nlohmann::json report_manifest(const ExperimentConfig& c, const std::string& method, std::uint64_t seed) {
  return {{"method", method}, {"family", c.family}, {"variant", c.variant}, {"seed", seed}, {"config_hash", c.hash}};
}

inline ISModelBundle load_is_bundle(const ExperimentConfig& c, const Corpus& corpus, std::uint64_t seed,
                                    const nlohmann::json& manifest) {
  const auto dir = run_dir(c, seed);
  std::vector<Checkpoint> ckpts;
  for (const auto& entry : manifest.at("checkpoints")) {
    ckpts.push_back(load_checked_checkpoint(c, dir / entry.at("file").get<std::string>()));
  }
  auto bundle = bundle_from_checkpoints(ckpts);
  if (bundle.value_names != corpus.values.names) throw ConfigError("checkpoint/config mismatch: value lists differ");
  if (bundle.annotator_ids != corpus.annotator_ids) {
    throw ConfigError("checkpoint/config mismatch: annotator lists differ");
  }
  return bundle;
}

}  // namespace detail

// IS diagnostics for one seed: each annotator's predicted value labels scored
// against that annotator's own labels, plus the raw prediction table.
struct AnnotatorDiagnostics {
  nlohmann::json metrics;
  std::string predictions_tsv;
};

inline AnnotatorDiagnostics annotator_diagnostics(const ExperimentConfig& c, const Corpus& corpus, std::uint64_t seed,
                                                  const std::vector<std::size_t>& values,
                                                  const std::vector<std::size_t>& rows) {
  const auto manifest = detail::load_run_manifest(c, seed);
  const auto bundle = detail::load_is_bundle(c, corpus, seed, manifest);
  const auto labels = predict_annotator_labels(bundle, detail::texts_of(corpus, rows));
  AnnotatorDiagnostics out;
  out.metrics = nlohmann::json::array();
  std::ostringstream tsv;
  tsv << "# config_hash=" << c.hash << " method=" << c.method_key() << " seed=" << seed << "\n";
  tsv << "argument_id\tannotator_id\tvalue\tprediction\tgold\n";
  for (std::size_t j = 0; j < corpus.n_annotators(); ++j) {
    nlohmann::json per_value = nlohmann::json::array();
    std::vector<PRF1> all;
    for (auto v : values) {
      std::vector<std::uint8_t> pred, gold;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        pred.push_back(labels.at(i, j, v));
        gold.push_back(corpus.annotation(rows[i], j, v));
      }
      const auto m = prf1(pred, gold);
      all.push_back(m);
      per_value.push_back({{"value", corpus.values.names[v]},
                           {"precision", m.precision},
                           {"recall", m.recall},
                           {"f1", m.f1},
                           {"degenerate", m.degenerate}});
    }
    const auto macro = macro_average(all);
    out.metrics.push_back({{"annotator_id", corpus.annotator_ids[j]},
                           {"per_value", per_value},
                           {"macro", {{"precision", macro.precision}, {"recall", macro.recall}, {"f1", macro.f1}}}});
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < corpus.n_annotators(); ++j) {
      for (auto v : values) {
        tsv << corpus.argument_ids[rows[i]] << "\t" << corpus.annotator_ids[j] << "\t" << corpus.values.names[v]
            << "\t" << int(labels.at(i, j, v)) << "\t" << int(corpus.annotation(rows[i], j, v)) << "\n";
      }
    }
  }
  out.predictions_tsv = tsv.str();
  return out;
}

// Per-value predictions on the test rows for one trained seed.
inline std::vector<std::vector<std::uint8_t>> predict_run(const ExperimentConfig& c, const Corpus& corpus,
                                                          std::uint64_t seed, const std::vector<std::size_t>& values,
                                                          const std::vector<std::size_t>& rows) {
  const auto manifest = detail::load_run_manifest(c, seed);
  const auto dir = run_dir(c, seed);
  const auto texts = detail::texts_of(corpus, rows);
  std::vector<std::vector<std::uint8_t>> preds;
  if (c.family == "DS") {
    for (auto v : values) {
      const auto path = dir / ("value_" + std::to_string(v) + ".ckpt");
      if (!fs::exists(path)) throw Error("missing checkpoint " + path.string());
      const auto ds = ds_from_checkpoint(detail::load_checked_checkpoint(c, path));
      if (ds.value_name != corpus.values.names[v]) {
        throw ConfigError("checkpoint/config mismatch: " + path.string() + " is for value " + ds.value_name);
      }
      preds.push_back(predict_ds(ds, texts).labels);
    }
    return preds;
  }
  const auto bundle = detail::load_is_bundle(c, corpus, seed, manifest);
  const auto labels = predict_annotator_labels(bundle, texts);
  const auto subj = infer_subjectivity_from_predictions(labels);
  for (auto v : values) {
    std::vector<std::uint8_t> col;
    for (std::size_t i = 0; i < rows.size(); ++i) col.push_back(subj[i * corpus.n_values() + v]);
    preds.push_back(std::move(col));
  }
  return preds;
}

struct EvaluationOutput {
  std::vector<MetricsReport> runs;
  MetricsReport aggregate;
  std::vector<MetricsReport> baseline_runs;
  MetricsReport baseline;
  nlohmann::json document;
  // IS only: file name -> contents, written next to the metrics.
  std::vector<std::pair<std::string, std::string>> extra_files;
};

inline MetricsReport baseline_report(const ExperimentConfig& c, const std::vector<std::string>& names,
                                     const std::vector<std::vector<std::uint8_t>>& gold,
                                     const std::vector<double>& ratios, std::uint64_t seed) {
  std::vector<std::vector<std::uint8_t>> preds;
  for (std::size_t v = 0; v < gold.size(); ++v) {
    preds.push_back(random_baseline(gold[v], mix64(seed) ^ mix64(0xba5e + v)));
  }
  auto r = make_report("baseline-random", names, preds, gold, ratios);
  r.manifest = {{"method", "baseline-random"}, {"seed", seed}, {"config_hash", c.hash}};
  return r;
}

inline void write_metrics_files(const fs::path& dir, const nlohmann::json& document,
                                const std::vector<MetricsReport>& flat, const std::vector<MetricsReport>& table,
                                const std::string& hash, CommandResult& result) {
  write_text_file(dir / "metrics.json", dump_json(document));
  write_text_file(dir / "metrics.csv", to_flat_csv(flat, hash));
  write_text_file(dir / "metrics_table.csv", to_table_csv(table, hash));
  for (const char* f : {"metrics.json", "metrics.csv", "metrics_table.csv"}) result.written.push_back((dir / f).string());
}

inline EvaluationOutput evaluate_experiment(const ExperimentConfig& c, const Corpus& corpus) {
  EvaluationOutput out;
  const auto values = selected_values(c, corpus);
  std::vector<std::string> names;
  std::vector<double> ratios;
  for (auto v : values) {
    names.push_back(corpus.values.names[v]);
    ratios.push_back(ratio_or_nan(corpus, v));
  }
  std::optional<std::vector<std::size_t>> first_test;
  nlohmann::json annotator_docs = nlohmann::json::array();
  for (auto seed : c.seeds) {
    const auto split = split_for(c, corpus, seed);
    if (c.fixed_test && first_test && *first_test != split.test) throw Error("fixed test split changed across seeds");
    if (!first_test) first_test = split.test;
    std::vector<std::vector<std::uint8_t>> gold;
    for (auto v : values) gold.push_back(detail::gold_of(corpus, split.test, v));
    const auto preds = predict_run(c, corpus, seed, values, split.test);
    auto report = make_report(c.method_key(), names, preds, gold, ratios);
    report.manifest = detail::report_manifest(c, c.method_key(), seed);
    out.runs.push_back(std::move(report));
    out.baseline_runs.push_back(baseline_report(c, names, gold, ratios, seed));
    if (c.family == "IS") {
      auto diag = annotator_diagnostics(c, corpus, seed, values, split.test);
      annotator_docs.push_back({{"seed", seed}, {"annotators", std::move(diag.metrics)}});
      out.extra_files.emplace_back("annotator_predictions_seed_" + std::to_string(seed) + ".tsv",
                                   std::move(diag.predictions_tsv));
    }
  }
  out.aggregate = aggregate_runs(out.runs);
  out.baseline = aggregate_runs(out.baseline_runs);

  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : out.runs) runs.push_back(to_json(r));
  nlohmann::json baseline_runs = nlohmann::json::array();
  for (const auto& r : out.baseline_runs) baseline_runs.push_back(to_json(r));
  out.document = {{"config_hash", c.hash},
                  {"family", c.family},
                  {"variant", c.variant},
                  {"seeds", c.seeds},
                  {"test_size", first_test ? first_test->size() : 0},
                  {"result", to_json(out.aggregate)},
                  {"baseline", to_json(out.baseline)},
                  {"runs", runs},
                  {"baseline_runs", baseline_runs}};
  if (c.family == "IS") out.document["annotator_metrics"] = annotator_docs;
  return out;
}

inline CommandResult cmd_evaluate(const ExperimentConfig& c, const LogSink& log = {}) {
  CommandResult result;
  const auto corpus = load_prepared_corpus(c);
  const auto ev = evaluate_experiment(c, corpus);
  std::vector<MetricsReport> flat = ev.runs;
  flat.insert(flat.end(), ev.baseline_runs.begin(), ev.baseline_runs.end());
  write_metrics_files(eval_dir(c), ev.document, flat, {ev.aggregate, ev.baseline}, c.hash, result);
  for (const auto& [name, content] : ev.extra_files) {
    write_text_file(eval_dir(c) / name, content);
    result.written.push_back((eval_dir(c) / name).string());
  }
  if (log) {
    log(c.method_key() + ": macro F1 " + fixed(ev.aggregate.macro.f1, 4) + " over " +
        std::to_string(ev.aggregate.runs) + " run(s); baseline " + fixed(ev.baseline.macro.f1, 4));
  }
  return result;
}

// Random-baseline metrics on the test split alone; needs no checkpoints.
inline CommandResult cmd_baseline(const ExperimentConfig& c, const LogSink& log = {}) {
  CommandResult result;
  const auto corpus = load_prepared_corpus(c);
  const auto values = selected_values(c, corpus);
  std::vector<std::string> names;
  std::vector<double> ratios;
  for (auto v : values) {
    names.push_back(corpus.values.names[v]);
    ratios.push_back(ratio_or_nan(corpus, v));
  }
  std::vector<MetricsReport> runs;
  for (auto seed : c.seeds) {
    const auto split = split_for(c, corpus, seed);
    std::vector<std::vector<std::uint8_t>> gold;
    for (auto v : values) gold.push_back(detail::gold_of(corpus, split.test, v));
    runs.push_back(baseline_report(c, names, gold, ratios, seed));
  }
  const auto agg = aggregate_runs(runs);
  nlohmann::json run_docs = nlohmann::json::array();
  for (const auto& r : runs) run_docs.push_back(to_json(r));
  const nlohmann::json doc{{"config_hash", c.hash}, {"seeds", c.seeds}, {"result", to_json(agg)}, {"runs", run_docs}};
  write_metrics_files(fs::path(c.output_dir) / "baseline", doc, runs, {agg}, c.hash, result);
  if (log) log("baseline: macro F1 " + fixed(agg.macro.f1, 4));
  return result;
}

// ---------------------------------------------------------------------------
// export-embeddings

struct ExportOptions {
  std::optional<std::uint64_t> seed;  // defaults to the first configured seed
  std::string part = "test";          // train | val | test | all
  // Position within the selected value set; picks the DS model and the label
  // column.
  std::size_t value = 0;
  // IS-each: which annotator's model embeds; empty means the first.
  std::string annotator;
  bool projection = true;
  std::string out;  // empty: <run dir>/embeddings_<part>_value<idx>.tsv
};

struct EmbeddingTable {
  std::vector<std::string> argument_ids;
  std::vector<std::uint8_t> labels;
  Eigen::MatrixXd embeddings;
  Eigen::MatrixXd projection;  // [n x 2] or empty
};

inline EmbeddingTable compute_embeddings(const ExperimentConfig& c, const Corpus& corpus, const ExportOptions& o,
                                         std::string* header_note = nullptr) {
  const auto seed = o.seed.value_or(c.seeds.front());
  const auto manifest = detail::load_run_manifest(c, seed);
  const auto split = split_for(c, corpus, seed);
  std::vector<std::size_t> rows;
  if (o.part == "train") {
    rows = split.train;
  } else if (o.part == "val") {
    rows = split.val;
  } else if (o.part == "test") {
    rows = split.test;
  } else if (o.part == "all") {
    for (std::size_t i = 0; i < corpus.size(); ++i) rows.push_back(i);
  } else {
    throw ConfigError("split part must be train, val, test or all");
  }
  const auto values = selected_values(c, corpus);
  if (o.value >= values.size()) throw ConfigError("value position out of range of the selected value set");
  const auto v = values[o.value];
  const auto dir = run_dir(c, seed);

  Model model;
  std::vector<std::string> texts = detail::texts_of(corpus, rows);
  std::string source;
  if (c.family == "DS") {
    const auto path = dir / ("value_" + std::to_string(v) + ".ckpt");
    model = ds_from_checkpoint(detail::load_checked_checkpoint(c, path)).model;
    source = path.filename().string();
  } else {
    std::vector<Checkpoint> ckpts;
    for (const auto& entry : manifest.at("checkpoints")) {
      ckpts.push_back(detail::load_checked_checkpoint(c, dir / entry.at("file").get<std::string>()));
    }
    auto bundle = bundle_from_checkpoints(ckpts);
    std::size_t a = 0;
    if (!o.annotator.empty()) {
      const auto it = std::find(bundle.annotator_ids.begin(), bundle.annotator_ids.end(), o.annotator);
      if (it == bundle.annotator_ids.end()) throw ConfigError("unknown annotator '" + o.annotator + "'");
      a = static_cast<std::size_t>(it - bundle.annotator_ids.begin());
    }
    if (bundle.variant == ISVariant::kEach) {
      model = bundle.models[a];
    } else {
      model = bundle.models.front();
    }
    if (bundle.variant == ISVariant::kSingle) {
      for (auto& t : texts) t = format_annotator_input(bundle.annotator_token_format, bundle.annotator_ids[a], t);
    }
    source = "annotator " + bundle.annotator_ids[a];
  }
  EmbeddingTable table;
  table.argument_ids = split.ids(corpus, rows);
  for (auto r : rows) table.labels.push_back(corpus.subjective(r, v));
  table.embeddings = model.encoder->embed(texts);
  if (o.projection) table.projection = principal_components(table.embeddings, 2);
  if (header_note) {
    *header_note = "config_hash=" + c.hash + " method=" + c.method_key() + " seed=" + std::to_string(seed) +
                   " part=" + o.part + " value=" + corpus.values.names[v] + " model=" + source;
  }
  return table;
}

inline std::string embeddings_tsv(const EmbeddingTable& t, const std::string& note) {
  std::ostringstream out;
  out << "# " << note << "\n";
  out << "argument_id\tsubjectivity";
  for (Eigen::Index d = 0; d < t.embeddings.cols(); ++d) out << "\te" << d;
  if (t.projection.size() > 0) out << "\tpc1\tpc2";
  out << "\n";
  for (std::size_t i = 0; i < t.argument_ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << t.argument_ids[i] << "\t" << subjectivity_word(t.labels[i]);
    for (Eigen::Index d = 0; d < t.embeddings.cols(); ++d) out << "\t" << format_double(t.embeddings(r, d));
    if (t.projection.size() > 0) out << "\t" << format_double(t.projection(r, 0)) << "\t" << format_double(t.projection(r, 1));
    out << "\n";
  }
  return out.str();
}

inline CommandResult cmd_export_embeddings(const ExperimentConfig& c, const ExportOptions& o, const LogSink& log = {}) {
  CommandResult result;
  const auto corpus = load_prepared_corpus(c);
  std::string note;
  const auto table = compute_embeddings(c, corpus, o, &note);
  const auto seed = o.seed.value_or(c.seeds.front());
  const fs::path path = o.out.empty() ? run_dir(c, seed) / ("embeddings_" + o.part + "_value" +
                                                            std::to_string(selected_values(c, corpus)[o.value]) + ".tsv")
                                      : fs::path(o.out);
  write_text_file(path, embeddings_tsv(table, note));
  result.written.push_back(path.string());
  if (log) log("wrote " + std::to_string(table.argument_ids.size()) + " embeddings to " + path.string());
  return result;
}

}  // namespace subjlab

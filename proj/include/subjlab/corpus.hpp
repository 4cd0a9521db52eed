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

// Multi-annotator corpus: ingestion, annotator/value selection, subjectivity
// labels, splits, agreement statistics, and minority-class augmentation.
//
// Polarity convention: a subjectivity bit of 1 means the annotators of the
// fixed group DISAGREE on the value (subjective); 0 means they agree. Reports
// print the words "subjective" / "non-subjective", never the bare bit.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "subjlab/error.hpp"
#include "subjlab/paraphrase.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

struct AnnotationRecord {
  std::string argument_id;
  std::string annotator_id;
  std::string text;
  std::vector<std::uint8_t> labels;
};

struct FormatConfig {
  char delimiter = '\t';
  // Expected label-vector length; when unset the first data row decides.
  std::optional<std::size_t> taxonomy_size;
  // Header detection: a first row whose label column does not start with '['
  // is treated as a header.
  bool auto_header = true;
};

namespace detail {

// Splits one row into fields. A field that starts with a quote (' or ") runs
// to the matching quote that is followed by the delimiter or end of line;
// a doubled quote inside is a literal quote. A field that starts with '['
// runs to the matching ']'.
inline std::vector<std::string> split_row(std::string_view line, char delim) {
  std::vector<std::string> fields;
  std::size_t i = 0;
  const auto skip_spaces = [&] {
    while (i < line.size() && line[i] == ' ' && delim != ' ') ++i;
  };
  for (;;) {
    skip_spaces();
    std::string field;
    if (i < line.size() && (line[i] == '\'' || line[i] == '"')) {
      const char q = line[i++];
      bool closed = false;
      while (i < line.size()) {
        if (line[i] == q) {
          if (i + 1 < line.size() && line[i + 1] == q) {
            field += q;
            i += 2;
            continue;
          }
          std::size_t k = i + 1;
          while (k < line.size() && line[k] == ' ' && delim != ' ') ++k;
          if (k == line.size() || line[k] == delim) {
            i = k;
            closed = true;
            break;
          }
        }
        field += line[i++];
      }
      if (!closed) field.insert(field.begin(), q);
    } else if (i < line.size() && line[i] == '[') {
      const auto close = line.find(']', i);
      const auto end = close == std::string_view::npos ? line.size() : close + 1;
      field = std::string(line.substr(i, end - i));
      i = end;
      while (i < line.size() && line[i] != delim) field += line[i++];
    } else {
      while (i < line.size() && line[i] != delim) field += line[i++];
    }
    fields.emplace_back(trim(field));
    if (i >= line.size()) break;
    ++i;  // delimiter
  }
  return fields;
}

inline std::vector<std::uint8_t> parse_label_vector(std::string_view field,
                                                    const std::string& source,
                                                    std::size_t line_no) {
  field = trim(field);
  if (field.size() < 2 || field.front() != '[' || field.back() != ']') {
    throw ParseError(source, line_no, "label vector must be a bracketed list");
  }
  std::vector<std::uint8_t> labels;
  std::string token;
  const auto flush = [&] {
    if (token.empty()) return;
    if (token == "0") {
      labels.push_back(0);
    } else if (token == "1") {
      labels.push_back(1);
    } else {
      throw ParseError(source, line_no, "non-binary label token '" + token + "'");
    }
    token.clear();
  };
  for (char c : field.substr(1, field.size() - 2)) {
    if (c == ',' || std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      token += c;
    }
  }
  flush();
  return labels;
}

}  // namespace detail

// Reads rows of [argument id, worker id, premise, label vector]. Row order is
// preserved; label vectors must be binary and of uniform length.
inline std::vector<AnnotationRecord> parse_annotations(std::istream& in,
                                                       const FormatConfig& format,
                                                       const std::string& source = "<stream>") {
  std::vector<AnnotationRecord> records;
  std::optional<std::size_t> width = format.taxonomy_size;
  std::set<std::pair<std::string, std::string>> seen;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    if (!is_valid_utf8(line)) throw ParseError(source, line_no, "row is not valid UTF-8");
    auto fields = detail::split_row(line, format.delimiter);
    if (first && format.auto_header) {
      first = false;
      if (fields.size() >= 4 && (fields.back().empty() || fields.back().front() != '[')) continue;
    }
    first = false;
    if (fields.size() < 4) {
      throw ParseError(source, line_no,
                       "expected 4 columns, found " + std::to_string(fields.size()));
    }
    // A comma-delimited premise that was not quoted splits into several
    // fields; everything between the worker id and the label vector is text.
    std::string text = fields[2];
    for (std::size_t f = 3; f + 1 < fields.size(); ++f) {
      text += format.delimiter;
      text += fields[f];
    }
    AnnotationRecord rec;
    rec.argument_id = fields[0];
    rec.annotator_id = fields[1];
    rec.text = std::move(text);
    rec.labels = detail::parse_label_vector(fields.back(), source, line_no);
    if (rec.argument_id.empty() || rec.annotator_id.empty()) {
      throw ParseError(source, line_no, "empty argument or worker id");
    }
    if (!width) width = rec.labels.size();
    if (rec.labels.size() != *width) {
      throw ParseError(source, line_no,
                       "label vector has length " + std::to_string(rec.labels.size()) +
                           ", expected " + std::to_string(*width));
    }
    if (!seen.emplace(rec.argument_id, rec.annotator_id).second) {
      throw DuplicateError(source + ":" + std::to_string(line_no) + ": duplicate annotation of " +
                           rec.argument_id + " by " + rec.annotator_id);
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<AnnotationRecord> parse_annotation_file(const std::string& path,
                                                           const FormatConfig& format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open annotation file " + path);
  return parse_annotations(in, format, path);
}

// The k annotators with the most distinct annotated arguments; ties go to the
// lexicographically smaller id.
inline std::vector<std::string> select_annotators(const std::vector<AnnotationRecord>& records,
                                                  std::size_t k) {
  if (k < 1) throw SelectionError("annotator count must be at least 1");
  if (records.empty()) throw SelectionError("no annotation records");
  std::map<std::string, std::set<std::string>> args_by_annotator;
  for (const auto& r : records) args_by_annotator[r.annotator_id].insert(r.argument_id);
  if (args_by_annotator.size() < k) {
    throw SelectionError("requested " + std::to_string(k) + " annotators but only " +
                         std::to_string(args_by_annotator.size()) + " are present");
  }
  std::vector<std::pair<std::size_t, std::string>> ranked;
  for (const auto& [id, args] : args_by_annotator) ranked.emplace_back(args.size(), id);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(ranked[i].second);
  return out;
}

struct ValueSelection {
  std::vector<std::string> names;
  std::vector<std::size_t> indices;
  std::size_t k() const { return indices.size(); }
};

// The k columns with the most positive annotations among `annotators`; ties
// go to the smaller column index. `taxonomy_names`, when non-empty, supplies
// the name of each column.
inline ValueSelection select_values(const std::vector<AnnotationRecord>& records,
                                    const std::vector<std::string>& annotators, std::size_t k,
                                    const std::vector<std::string>& taxonomy_names = {}) {
  if (k < 1) throw SelectionError("value count must be at least 1");
  if (records.empty()) throw SelectionError("no annotation records");
  const std::size_t width = records.front().labels.size();
  if (k > width) {
    throw SelectionError("requested " + std::to_string(k) + " values but the taxonomy has " +
                         std::to_string(width));
  }
  if (!taxonomy_names.empty() && taxonomy_names.size() != width) {
    throw SelectionError("taxonomy name list has " + std::to_string(taxonomy_names.size()) +
                         " entries, label vectors have " + std::to_string(width));
  }
  const std::set<std::string> wanted(annotators.begin(), annotators.end());
  std::vector<std::size_t> counts(width, 0);
  for (const auto& r : records) {
    if (!wanted.count(r.annotator_id)) continue;
    for (std::size_t c = 0; c < width; ++c) counts[c] += r.labels[c];
  }
  std::vector<std::size_t> order(width);
  for (std::size_t c = 0; c < width; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  ValueSelection sel;
  for (std::size_t i = 0; i < k; ++i) {
    const auto c = order[i];
    sel.indices.push_back(c);
    sel.names.push_back(taxonomy_names.empty() ? "value_" + std::to_string(c)
                                               : taxonomy_names[c]);
  }
  return sel;
}

// 1 when the annotators do not all give the same label.
inline std::uint8_t derive_subjectivity(std::span<const std::uint8_t> labels_over_annotators) {
  if (labels_over_annotators.size() < 2) {
    throw Error("subjectivity needs at least two annotators");
  }
  const auto first = labels_over_annotators.front();
  for (auto l : labels_over_annotators) {
    if (l != first) return 1;
  }
  return 0;
}

class Corpus {
 public:
  std::vector<std::string> argument_ids;
  std::vector<std::string> texts;
  std::vector<std::string> annotator_ids;
  ValueSelection values;
  // Row-major [argument][annotator][value].
  std::vector<std::uint8_t> annotations;
  // Row-major [argument][value]; 1 = subjective.
  std::vector<std::uint8_t> subjectivity;

  std::size_t size() const { return argument_ids.size(); }
  std::size_t n_annotators() const { return annotator_ids.size(); }
  std::size_t n_values() const { return values.k(); }

  std::uint8_t annotation(std::size_t arg, std::size_t annotator, std::size_t value) const {
    return annotations[(arg * n_annotators() + annotator) * n_values() + value];
  }
  std::uint8_t& annotation(std::size_t arg, std::size_t annotator, std::size_t value) {
    return annotations[(arg * n_annotators() + annotator) * n_values() + value];
  }
  std::uint8_t subjective(std::size_t arg, std::size_t value) const {
    return subjectivity[arg * n_values() + value];
  }

  std::vector<std::uint8_t> annotator_labels(std::size_t arg, std::size_t annotator) const {
    const auto* p = &annotations[(arg * n_annotators() + annotator) * n_values()];
    return {p, p + n_values()};
  }

  std::size_t count_subjective(std::size_t value) const {
    check_value(value);
    std::size_t c = 0;
    for (std::size_t i = 0; i < size(); ++i) c += subjective(i, value);
    return c;
  }

  void check_value(std::size_t value) const {
    if (value >= n_values()) {
      throw Error("value index " + std::to_string(value) + " out of range (corpus has " +
                  std::to_string(n_values()) + " values)");
    }
  }

  // Recomputes the subjectivity matrix from the annotation tensor.
  void derive_all_subjectivity() {
    subjectivity.assign(size() * n_values(), 0);
    std::vector<std::uint8_t> slice(n_annotators());
    for (std::size_t i = 0; i < size(); ++i) {
      for (std::size_t v = 0; v < n_values(); ++v) {
        for (std::size_t j = 0; j < n_annotators(); ++j) slice[j] = annotation(i, j, v);
        subjectivity[i * n_values() + v] = derive_subjectivity(slice);
      }
    }
  }

  std::optional<std::size_t> index_of(const std::string& argument_id) const {
    for (std::size_t i = 0; i < argument_ids.size(); ++i) {
      if (argument_ids[i] == argument_id) return i;
    }
    return std::nullopt;
  }
};

// Keeps the arguments annotated by every selected annotator, in order of first
// appearance, and projects label vectors onto the selected columns.
inline Corpus build_corpus(const std::vector<AnnotationRecord>& records,
                           const std::vector<std::string>& annotators,
                           const ValueSelection& selection) {
  if (annotators.size() < 2) throw SelectionError("a corpus needs at least two annotators");
  std::unordered_map<std::string, std::size_t> annotator_pos;
  for (std::size_t j = 0; j < annotators.size(); ++j) annotator_pos[annotators[j]] = j;
  if (annotator_pos.size() != annotators.size()) throw SelectionError("duplicate annotator id");
  for (auto c : selection.indices) {
    if (!records.empty() && c >= records.front().labels.size()) {
      throw SelectionError("value column out of taxonomy bounds");
    }
  }

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<const AnnotationRecord*>> by_arg;
  for (const auto& r : records) {
    if (!annotator_pos.count(r.annotator_id)) continue;
    auto& slot = by_arg[r.argument_id];
    if (slot.empty()) {
      slot.assign(annotators.size(), nullptr);
      order.push_back(r.argument_id);
    }
    slot[annotator_pos[r.annotator_id]] = &r;
  }

  Corpus corpus;
  corpus.annotator_ids = annotators;
  corpus.values = selection;
  for (const auto& arg : order) {
    const auto& slot = by_arg[arg];
    if (std::any_of(slot.begin(), slot.end(), [](auto* p) { return p == nullptr; })) continue;
    corpus.argument_ids.push_back(arg);
    corpus.texts.push_back(slot.front()->text);
    for (const auto* rec : slot) {
      for (auto c : selection.indices) corpus.annotations.push_back(rec->labels[c]);
    }
  }
  if (corpus.size() == 0) {
    throw EmptyCorpusError("no argument is annotated by all selected annotators");
  }
  corpus.derive_all_subjectivity();
  return corpus;
}

// #subjective / #non-subjective for one value.
inline double subjectivity_ratio(const Corpus& corpus, std::size_t value) {
  const auto s = corpus.count_subjective(value);
  const auto ns = corpus.size() - s;
  if (ns == 0) {
    throw UndefinedError("subjectivity ratio undefined: value " + corpus.values.names[value] +
                         " has no non-subjective instance");
  }
  return static_cast<double>(s) / static_cast<double>(ns);
}

// ---------------------------------------------------------------------------
// Splits

struct SplitFractions {
  double train = 0.78;
  double test = 0.22;
  // Share of the training portion held out for validation.
  double val_of_train = 0.10;
};

struct SplitSpec {
  // Corpus row indices, each sorted ascending.
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
  std::uint64_t test_seed = 0;
  bool fixed_test = false;
  SplitFractions fractions;

  std::vector<std::string> ids(const Corpus& corpus, const std::vector<std::size_t>& rows) const {
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(corpus.argument_ids[r]);
    return out;
  }

  bool operator==(const SplitSpec& o) const {
    return train == o.train && val == o.val && test == o.test;
  }
};

struct SplitOptions {
  SplitFractions fractions;
  std::uint64_t seed = 0;
  // When set, the test partition is drawn with test_seed only, so every train
  // seed shares the same test set.
  bool fixed_test = true;
  std::uint64_t test_seed = 20240101;
  // Stratify on the subjectivity of this value column.
  std::optional<std::size_t> stratify_value;
};

// Sizes round to the nearest integer; the remainder goes to train.
inline SplitSpec make_splits(const Corpus& corpus, const SplitOptions& opts) {
  const auto& f = opts.fractions;
  const auto in_open_unit = [](double x) { return x > 0.0 && x < 1.0; };
  if (!in_open_unit(f.train) || !in_open_unit(f.test)) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }
  if (std::abs(f.train + f.test - 1.0) > 1e-9) {
    throw ConfigError("train and test fractions must sum to 1");
  }
  if (f.val_of_train < 0.0 || f.val_of_train >= 1.0) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
  if (corpus.size() == 0) throw EmptyCorpusError("cannot split an empty corpus");
  if (opts.stratify_value) corpus.check_value(*opts.stratify_value);

  std::vector<std::vector<std::size_t>> strata(1);
  if (opts.stratify_value) {
    strata.assign(2, {});
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      strata[corpus.subjective(i, *opts.stratify_value)].push_back(i);
    }
  } else {
    for (std::size_t i = 0; i < corpus.size(); ++i) strata[0].push_back(i);
  }

  SplitSpec spec;
  spec.seed = opts.seed;
  spec.fixed_test = opts.fixed_test;
  spec.test_seed = opts.fixed_test ? opts.test_seed : opts.seed;
  spec.fractions = f;
  Rng test_rng(mix64(spec.test_seed) ^ 0x7e57ULL);
  Rng train_rng(mix64(opts.seed) ^ 0x78a1ULL);
  for (auto& stratum : strata) {
    const auto n = stratum.size();
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.test));
    test_rng.shuffle(stratum);
    spec.test.insert(spec.test.end(), stratum.begin(), stratum.begin() + n_test);
    std::vector<std::size_t> rest(stratum.begin() + n_test, stratum.end());
    // Canonical order first so the train/val draw depends on the seed only.
    std::sort(rest.begin(), rest.end());
    const auto n_val =
        static_cast<std::size_t>(std::llround(static_cast<double>(rest.size()) * f.val_of_train));
    train_rng.shuffle(rest);
    spec.val.insert(spec.val.end(), rest.begin(), rest.begin() + n_val);
    spec.train.insert(spec.train.end(), rest.begin() + n_val, rest.end());
  }
  std::sort(spec.train.begin(), spec.train.end());
  std::sort(spec.val.begin(), spec.val.end());
  std::sort(spec.test.begin(), spec.test.end());
  if (spec.test.empty()) throw ConfigError("split leaves the test set empty");
  if (spec.train.empty()) throw ConfigError("split leaves the training set empty");
  return spec;
}

// ---------------------------------------------------------------------------
// Agreement

// Fleiss' kappa for two categories from per-item counts of "present" ratings
// out of `raters`. Returns nullopt when expected agreement is 1 (every rating
// in one category), where kappa is undefined.
inline std::optional<double> fleiss_kappa_binary(std::span<const std::size_t> present_counts,
                                                 std::size_t raters) {
  if (raters < 2) throw Error("Fleiss' kappa needs at least two raters");
  if (present_counts.empty()) throw Error("Fleiss' kappa needs at least one item");
  const double m = static_cast<double>(raters);
  const double n = static_cast<double>(present_counts.size());
  double p_bar = 0.0;
  double total_present = 0.0;
  for (auto c : present_counts) {
    if (c > raters) throw Error("item has more ratings than raters");
    const double a = static_cast<double>(c);
    const double b = m - a;
    p_bar += (a * (a - 1.0) + b * (b - 1.0)) / (m * (m - 1.0));
    total_present += a;
  }
  p_bar /= n;
  const double p1 = total_present / (n * m);
  const double p0 = 1.0 - p1;
  const double p_e = p1 * p1 + p0 * p0;
  if (total_present == 0.0 || total_present == n * m) return std::nullopt;
  return (p_bar - p_e) / (1.0 - p_e);
}

inline std::optional<double> fleiss_kappa(const Corpus& corpus, std::size_t value) {
  corpus.check_value(value);
  std::vector<std::size_t> present(corpus.size(), 0);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (std::size_t j = 0; j < corpus.n_annotators(); ++j) present[i] += corpus.annotation(i, j, value);
  }
  return fleiss_kappa_binary(present, corpus.n_annotators());
}

// Landis & Koch interpretation bands.
inline std::string kappa_band(double kappa) {
  if (kappa < 0.0) return "poor";
  if (kappa <= 0.20) return "slight";
  if (kappa <= 0.40) return "fair";
  if (kappa <= 0.60) return "moderate";
  if (kappa <= 0.80) return "substantial";
  return "almost perfect";
}

// ---------------------------------------------------------------------------
// Augmentation

struct LabeledText {
  std::string text;
  std::uint8_t label = 0;
  bool generated = false;
  // Index of the original item a generated paraphrase came from.
  std::size_t source = 0;
};

struct AugmentResult {
  std::vector<LabeledText> items;
  std::size_t generated = 0;
  std::vector<std::string> warnings;
};

struct AugmentOptions {
  std::uint64_t seed = 0;
  DecodeParams decode;
  std::size_t candidates_per_request = 1;
};

// Appends paraphrases of minority-class texts until both classes have equal
// counts or the client stops producing new candidates. Originals are kept
// untouched and in order; generated items follow them. A failing client is
// replaced by word dropout for the remainder of the call, with a warning.
inline AugmentResult augment_minority(const std::vector<LabeledText>& pairs,
                                      ParaphraseClient* client, const AugmentOptions& opts) {
  AugmentResult result;
  result.items = pairs;
  std::size_t positives = 0;
  for (const auto& p : pairs) positives += p.label ? 1 : 0;
  const std::size_t negatives = pairs.size() - positives;
  if (positives == negatives) return result;
  const std::uint8_t minority = positives < negatives ? 1 : 0;
  const std::size_t deficit =
      positives < negatives ? negatives - positives : positives - negatives;
  std::vector<std::size_t> sources;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].label == minority) sources.push_back(i);
  }
  if (sources.empty()) throw AugmentError("cannot augment: the minority class is empty");

  WordDropoutParaphraser fallback(opts.seed);
  ParaphraseClient* active = client ? client : &fallback;
  Rng rng(mix64(opts.seed) ^ 0xa06ULL);
  rng.shuffle(sources);

  std::vector<bool> exhausted(sources.size(), false);
  std::size_t n_exhausted = 0;
  std::size_t cursor = 0;
  std::uint64_t round = 0;
  while (result.generated < deficit && n_exhausted < sources.size()) {
    const auto slot = cursor % sources.size();
    if (slot == 0 && cursor > 0) ++round;
    ++cursor;
    if (exhausted[slot]) continue;
    const auto src = sources[slot];
    ParaphraseRequest req{pairs[src].text, opts.candidates_per_request, opts.decode,
                          mix64(opts.seed) ^ mix64(round * 0x10001ULL + slot)};
    std::vector<std::string> candidates;
    try {
      candidates = active->paraphrase(req);
    } catch (const Error& e) {
      result.warnings.push_back(std::string("paraphraser '") + active->name() +
                                "' failed (" + e.what() + "); falling back to word dropout");
      active = &fallback;
      candidates = active->paraphrase(req);
    }
    if (candidates.empty()) {
      exhausted[slot] = true;
      ++n_exhausted;
      continue;
    }
    for (auto& c : candidates) {
      if (result.generated == deficit) break;
      result.items.push_back({std::move(c), minority, true, src});
      ++result.generated;
    }
  }
  if (result.generated < deficit) {
    result.warnings.push_back("paraphraser exhausted before classes were balanced");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Cache

inline constexpr const char* kCorpusMagic = "subjlab-corpus";
inline constexpr int kCorpusVersion = 1;

// Text container: versioned header, value selection, annotator ids, then one
// line per argument with the escaped text and the flattened annotation bits.
inline void save_corpus(const Corpus& c, std::ostream& out) {
  out << kCorpusMagic << " " << kCorpusVersion << "\n";
  out << "values " << c.n_values() << "\n";
  for (std::size_t v = 0; v < c.n_values(); ++v) {
    out << c.values.indices[v] << "\t" << escape_field(c.values.names[v]) << "\n";
  }
  out << "annotators " << c.n_annotators() << "\n";
  for (const auto& a : c.annotator_ids) out << escape_field(a) << "\n";
  out << "arguments " << c.size() << "\n";
  for (std::size_t i = 0; i < c.size(); ++i) {
    out << escape_field(c.argument_ids[i]) << "\t";
    for (std::size_t j = 0; j < c.n_annotators(); ++j) {
      for (std::size_t v = 0; v < c.n_values(); ++v) out << static_cast<char>('0' + c.annotation(i, j, v));
    }
    out << "\t";
    for (std::size_t v = 0; v < c.n_values(); ++v) out << static_cast<char>('0' + c.subjective(i, v));
    out << "\t" << escape_field(c.texts[i]) << "\n";
  }
}

inline Corpus load_corpus(std::istream& in, const std::string& source = "<corpus>") {
  std::size_t line_no = 0;
  std::string line;
  const auto next = [&]() -> std::string {
    if (!std::getline(in, line)) throw ParseError(source, line_no + 1, "unexpected end of file");
    ++line_no;
    return line;
  };
  const auto section = [&](const std::string& name) -> std::size_t {
    std::istringstream ss(next());
    std::string tag;
    std::size_t n = 0;
    if (!(ss >> tag >> n) || tag != name) throw ParseError(source, line_no, "expected '" + name + "'");
    return n;
  };
  {
    std::istringstream ss(next());
    std::string magic;
    int version = 0;
    ss >> magic >> version;
    if (magic != kCorpusMagic) throw ParseError(source, line_no, "not a corpus cache");
    if (version != kCorpusVersion) {
      throw ParseError(source, line_no, "unsupported corpus cache version " + std::to_string(version));
    }
  }
  Corpus c;
  const auto k = section("values");
  for (std::size_t v = 0; v < k; ++v) {
    const auto l = next();
    const auto tab = l.find('\t');
    if (tab == std::string::npos) throw ParseError(source, line_no, "malformed value line");
    c.values.indices.push_back(std::stoul(l.substr(0, tab)));
    c.values.names.push_back(unescape_field(l.substr(tab + 1)));
  }
  const auto m = section("annotators");
  for (std::size_t j = 0; j < m; ++j) c.annotator_ids.push_back(unescape_field(next()));
  const auto n = section("arguments");
  std::string stored_subjectivity;
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = next();
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (int f = 0; f < 3; ++f) {
      const auto tab = l.find('\t', start);
      if (tab == std::string::npos) throw ParseError(source, line_no, "malformed argument line");
      parts.push_back(l.substr(start, tab - start));
      start = tab + 1;
    }
    parts.push_back(l.substr(start));
    if (parts[1].size() != m * k || parts[2].size() != k) {
      throw ParseError(source, line_no, "annotation bit string has wrong length");
    }
    c.argument_ids.push_back(unescape_field(parts[0]));
    c.texts.push_back(unescape_field(parts[3]));
    stored_subjectivity += parts[2];
    for (char b : parts[1]) {
      if (b != '0' && b != '1') throw ParseError(source, line_no, "non-binary annotation bit");
      c.annotations.push_back(static_cast<std::uint8_t>(b - '0'));
    }
  }
  c.derive_all_subjectivity();
  for (std::size_t x = 0; x < c.subjectivity.size(); ++x) {
    if (stored_subjectivity[x] != static_cast<char>('0' + c.subjectivity[x])) {
      throw ParseError(source, line_no, "stored subjectivity disagrees with annotations");
    }
  }
  return c;
}

inline void save_corpus_file(const Corpus& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write corpus cache " + path);
  save_corpus(c, out);
}

inline Corpus load_corpus_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open corpus cache " + path);
  return load_corpus(in, path);
}

}  // namespace subjlab

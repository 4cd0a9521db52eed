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

// Generator for keyword-driven synthetic annotation files.
//
// Every argument is a bag of filler words plus keywords. For value v:
//   "val<v>"  - the value is present for the agreeing annotators;
//   "subj<v>" - the annotators disagree on v: annotator (v mod m) marks it
//               present, everyone else marks it absent.
// Without "subj<v>" all annotators agree, so subjectivity of (text, v) is
// exactly the presence of "subj<v>".

#pragma once

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "subjlab/corpus.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

struct SyntheticSpec {
  std::size_t n_arguments = 500;
  std::size_t n_annotators = 4;
  std::size_t n_values = 4;
  // Unused taxonomy columns appended after the value columns.
  std::size_t extra_columns = 2;
  std::size_t filler_vocabulary = 50;
  std::size_t min_filler = 6;
  std::size_t max_filler = 10;
  double value_rate = 0.4;
  double subjective_rate = 0.3;
  // An additional annotator covering this share of arguments, so annotator
  // selection has something to discard.
  double sparse_annotator_rate = 0.1;
  std::uint64_t seed = 7;
};

inline std::string synthetic_argument_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "A%05zu", i);
  return buf;
}

inline std::string synthetic_annotator_id(std::size_t j) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "W%03zu", j + 1);
  return buf;
}

inline std::vector<AnnotationRecord> make_synthetic_records(const SyntheticSpec& spec) {
  if (spec.n_annotators < 2) throw ConfigError("synthetic corpus needs at least two annotators");
  if (spec.n_values < 1 || spec.n_arguments < 1) throw ConfigError("synthetic corpus needs values and arguments");
  if (spec.max_filler < spec.min_filler) throw ConfigError("max_filler < min_filler");
  Rng rng(spec.seed);
  const auto width = spec.n_values + spec.extra_columns;
  std::vector<AnnotationRecord> records;
  for (std::size_t i = 0; i < spec.n_arguments; ++i) {
    std::vector<std::string> tokens;
    const auto n_filler = spec.min_filler + rng.index(spec.max_filler - spec.min_filler + 1);
    for (std::size_t t = 0; t < n_filler; ++t) tokens.push_back("w" + std::to_string(rng.index(spec.filler_vocabulary)));
    std::vector<bool> present(spec.n_values), subjective(spec.n_values);
    for (std::size_t v = 0; v < spec.n_values; ++v) {
      present[v] = rng.uniform() < spec.value_rate;
      subjective[v] = rng.uniform() < spec.subjective_rate;
      if (present[v]) tokens.push_back("val" + std::to_string(v));
      if (subjective[v]) tokens.push_back("subj" + std::to_string(v));
    }
    rng.shuffle(tokens);
    const auto text = join(tokens, " ");
    const auto labels_for = [&](std::size_t j) {
      std::vector<std::uint8_t> labels(width, 0);
      for (std::size_t v = 0; v < spec.n_values; ++v) {
        if (subjective[v]) {
          labels[v] = (j == v % spec.n_annotators) ? 1 : 0;
        } else {
          labels[v] = present[v] ? 1 : 0;
        }
      }
      return labels;
    };
    for (std::size_t j = 0; j < spec.n_annotators; ++j) {
      records.push_back({synthetic_argument_id(i), synthetic_annotator_id(j), text, labels_for(j)});
    }
    if (rng.uniform() < spec.sparse_annotator_rate) {
      records.push_back({synthetic_argument_id(i), "W999", text, labels_for(0)});
    }
  }
  return records;
}

// Tab-separated with a header row, in the ingest format.
inline void write_annotation_table(std::ostream& out, const std::vector<AnnotationRecord>& records) {
  out << "Argument ID\tWorker ID\tPremise\tLabels\n";
  for (const auto& r : records) {
    out << r.argument_id << "\t" << r.annotator_id << "\t" << r.text << "\t[";
    for (std::size_t c = 0; c < r.labels.size(); ++c) out << (c ? ", " : "") << int(r.labels[c]);
    out << "]\n";
  }
}

}  // namespace subjlab

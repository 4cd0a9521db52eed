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

// Shared helpers for the unit tests.

#pragma once

#include "subjlab/corpus.hpp"
#include "subjlab/encoder.hpp"
#include "subjlab/synthetic.hpp"

namespace subjlab::testing {

inline Corpus corpus_from(const std::vector<AnnotationRecord>& records, std::size_t m, std::size_t k) {
  const auto annotators = select_annotators(records, m);
  return build_corpus(records, annotators, select_values(records, annotators, k));
}

inline Corpus synthetic_corpus(std::size_t n = 300, std::uint64_t seed = 7) {
  SyntheticSpec spec;
  spec.n_arguments = n;
  spec.seed = seed;
  return corpus_from(make_synthetic_records(spec), spec.n_annotators, spec.n_values);
}

inline TrainConfig fast_train(std::size_t epochs = 20) {
  TrainConfig t;
  t.learning_rate = 0.05;
  t.epochs = epochs;
  return t;
}

}  // namespace subjlab::testing

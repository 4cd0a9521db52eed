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

// Inferred subjectivity: predict every annotator's value labels, then flag a
// (text, value) cell as subjective when the predicted labels differ across
// annotators.
//
// Three architectures:
//   each   - an independent encoder + multi-label head per annotator.
//   shared - one encoder, one multi-label head per annotator; the per-head
//            BCE losses are summed.
//   single - one encoder and one head; the annotator id is written into the
//            input text through a template.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "subjlab/corpus.hpp"
#include "subjlab/encoder.hpp"
#include "subjlab/evaluation.hpp"

namespace subjlab {

enum class ISVariant { kEach, kShared, kSingle };

inline std::string to_string(ISVariant v) {
  switch (v) {
    case ISVariant::kEach: return "each";
    case ISVariant::kShared: return "shared";
    case ISVariant::kSingle: return "single";
  }
  return "?";
}

inline ISVariant parse_is_variant(const std::string& s) {
  if (s == "each") return ISVariant::kEach;
  if (s == "shared") return ISVariant::kShared;
  if (s == "single") return ISVariant::kSingle;
  throw ConfigError("unknown IS variant '" + s + "' (expected each, shared, or single)");
}

inline constexpr const char* kDefaultAnnotatorTokenFormat = "[{annotator_id}] {text}";

// Substitutes {annotator_id} and {text} in `format`.
inline std::string format_annotator_input(const std::string& format, const std::string& annotator_id,
                                          const std::string& text) {
  std::string out;
  std::size_t i = 0;
  while (i < format.size()) {
    if (format.compare(i, 14, "{annotator_id}") == 0) {
      out += annotator_id;
      i += 14;
    } else if (format.compare(i, 6, "{text}") == 0) {
      out += text;
      i += 6;
    } else {
      out += format[i++];
    }
  }
  return out;
}

// Binary tensor [n x annotators x values].
struct LabelTensor {
  std::size_t n = 0, m = 0, k = 0;
  std::vector<std::uint8_t> data;

  LabelTensor() = default;
  LabelTensor(std::size_t n_, std::size_t m_, std::size_t k_) : n(n_), m(m_), k(k_), data(n_ * m_ * k_, 0) {}
  std::uint8_t& at(std::size_t i, std::size_t j, std::size_t v) { return data[(i * m + j) * k + v]; }
  std::uint8_t at(std::size_t i, std::size_t j, std::size_t v) const { return data[(i * m + j) * k + v]; }
};

struct ISOptions {
  std::string annotator_token_format = kDefaultAnnotatorTokenFormat;
  double threshold = 0.5;
  // Pick the decision threshold maximizing validation micro-F1 of the
  // per-annotator label predictions.
  bool tune_threshold = false;
  // Called with (model index, annotator index, corpus row) whenever training
  // reads an annotator's labels.
  std::function<void(std::size_t, std::size_t, std::size_t)> audit;
  EpochCallback on_epoch;
};

struct ISModelBundle {
  ISVariant variant = ISVariant::kEach;
  std::vector<std::string> annotator_ids;
  std::vector<std::string> value_names;
  // each: one model per annotator; shared: one model with one head per
  // annotator; single: one model with one head.
  std::vector<Model> models;
  std::string annotator_token_format = kDefaultAnnotatorTokenFormat;
  double threshold = 0.5;
  std::vector<EpochRecord> log;

  std::size_t n_annotators() const { return annotator_ids.size(); }
  std::size_t n_values() const { return value_names.size(); }
};

namespace detail {

inline Eigen::MatrixXd label_rows(const Corpus& corpus, std::span<const std::size_t> rows, std::size_t annotator) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(corpus.n_values()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t v = 0; v < corpus.n_values(); ++v) {
      y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(v)) = corpus.annotation(rows[r], annotator, v);
    }
  }
  return y;
}

}  // namespace detail

// Per-annotator sigmoid scores [n x annotators x values], row-major like
// LabelTensor.
inline std::vector<double> annotator_scores(const ISModelBundle& bundle, std::span<const std::string> texts) {
  const auto n = texts.size();
  const auto m = bundle.n_annotators();
  const auto k = bundle.n_values();
  std::vector<double> scores(n * m * k, 0.0);
  const auto fill = [&](std::size_t j, const Eigen::MatrixXd& logits) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t v = 0; v < k; ++v) {
        scores[(i * m + j) * k + v] = sigmoid(logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)));
      }
    }
  };
  switch (bundle.variant) {
    case ISVariant::kEach:
      for (std::size_t j = 0; j < m; ++j) fill(j, bundle.models.at(j).logits(texts));
      break;
    case ISVariant::kShared: {
      const auto& model = bundle.models.at(0);
      const auto emb = model.encoder->embed(texts);
      for (std::size_t j = 0; j < m; ++j) fill(j, head_forward(emb, model.heads.at(j)));
      break;
    }
    case ISVariant::kSingle:
      for (std::size_t j = 0; j < m; ++j) {
        std::vector<std::string> inputs;
        inputs.reserve(n);
        for (const auto& t : texts) {
          inputs.push_back(format_annotator_input(bundle.annotator_token_format, bundle.annotator_ids[j], t));
        }
        fill(j, bundle.models.at(0).logits(inputs));
      }
      break;
  }
  return scores;
}

// sigmoid(logit) > threshold per cell (strict, so logit 0 maps to 0 at the
// default threshold). Texts beyond the backend limit are truncated.
inline LabelTensor predict_annotator_labels(const ISModelBundle& bundle, std::span<const std::string> texts,
                                            std::optional<double> threshold = std::nullopt) {
  const double t = threshold.value_or(bundle.threshold);
  const auto scores = annotator_scores(bundle, texts);
  LabelTensor out(texts.size(), bundle.n_annotators(), bundle.n_values());
  for (std::size_t x = 0; x < scores.size(); ++x) out.data[x] = scores[x] > t ? 1 : 0;
  return out;
}

// Cell (i, v) is 1 when predictions for text i and value v are not identical
// across annotators.
inline std::vector<std::uint8_t> infer_subjectivity_from_predictions(const LabelTensor& pred) {
  if (pred.m < 2) throw Error("subjectivity inference needs at least two annotators");
  if (pred.data.size() != pred.n * pred.m * pred.k) throw ShapeError("label tensor size mismatch");
  std::vector<std::uint8_t> out(pred.n * pred.k, 0);
  std::vector<std::uint8_t> slice(pred.m);
  for (std::size_t i = 0; i < pred.n; ++i) {
    for (std::size_t v = 0; v < pred.k; ++v) {
      for (std::size_t j = 0; j < pred.m; ++j) slice[j] = pred.at(i, j, v);
      out[i * pred.k + v] = derive_subjectivity(slice);
    }
  }
  return out;
}

inline ISModelBundle train_is(const Corpus& corpus, const SplitSpec& split, ISVariant variant,
                              const EncoderConfig& encoder_config, const TrainConfig& train_config,
                              const ISOptions& options = {}) {
  validate(encoder_config);
  validate(train_config);
  const auto m = corpus.n_annotators();
  const auto k = corpus.n_values();
  if (m < 2) throw ConfigError("IS training needs at least two annotators");
  if (split.train.empty()) throw ConfigError("IS training needs training rows");
  if (variant == ISVariant::kSingle && options.annotator_token_format.empty()) {
    throw ConfigError("IS-single needs a non-empty annotator token format");
  }

  ISModelBundle bundle;
  bundle.variant = variant;
  bundle.annotator_ids = corpus.annotator_ids;
  bundle.value_names = corpus.values.names;
  bundle.annotator_token_format = options.annotator_token_format;
  bundle.threshold = options.threshold;

  const auto& train = split.train;
  const auto audit = [&](std::size_t model, std::size_t annotator, std::size_t row) {
    if (options.audit) options.audit(model, annotator, row);
  };
  const auto on_epoch = [&](const EpochRecord& r) {
    bundle.log.push_back(r);
    if (options.on_epoch) options.on_epoch(r);
  };

  const auto gather_texts = [&](std::span<const std::size_t> rows, const std::vector<std::size_t>& source) {
    std::vector<std::string> texts;
    for (auto r : rows) texts.push_back(corpus.texts[source[r]]);
    return texts;
  };

  switch (variant) {
    case ISVariant::kEach: {
      for (std::size_t j = 0; j < m; ++j) {
        Model model(make_encoder(encoder_config),
                    {ClassificationHead::make(HeadKind::kMultiLabel, encoder_config.embedding_dim, k,
                                              mix64(train_config.seed) ^ mix64(1000 + j))});
        const auto plan = [&, j](std::span<const std::size_t> rows, long) {
          StepPlan sp;
          sp.batch.texts = gather_texts(rows, train);
          for (auto r : rows) {
            sp.batch.ids.push_back(train[r]);
            audit(j, j, train[r]);
          }
          std::vector<std::size_t> corpus_rows;
          for (auto r : rows) corpus_rows.push_back(train[r]);
          Eigen::MatrixXd targets = detail::label_rows(corpus, corpus_rows, j);
          sp.loss = [targets](const ForwardPass& fp) {
            LossGrad lg;
            lg.d_logits.resize(1);
            const double bce = bce_loss(fp.logits[0], targets, &lg.d_logits[0]);
            lg.loss = combined_loss(bce, 0.0, 0.0);
            return lg;
          };
          return sp;
        };
        std::function<double(const Model&)> val;
        if (!split.val.empty()) {
          val = [&, j](const Model& mdl) {
            std::vector<std::string> texts;
            for (auto r : split.val) texts.push_back(corpus.texts[r]);
            return bce_loss(mdl.logits(texts), detail::label_rows(corpus, split.val, j));
          };
        }
        fit_epochs(model, train.size(), train_config, mix64(train_config.seed) ^ mix64(j + 1), plan, val,
                   "annotator:" + corpus.annotator_ids[j], on_epoch);
        bundle.models.push_back(std::move(model));
      }
      break;
    }
    case ISVariant::kShared: {
      std::vector<ClassificationHead> heads;
      for (std::size_t j = 0; j < m; ++j) {
        heads.push_back(ClassificationHead::make(HeadKind::kMultiLabel, encoder_config.embedding_dim, k,
                                                 mix64(train_config.seed) ^ mix64(1000 + j)));
      }
      Model model(make_encoder(encoder_config), std::move(heads));
      const auto plan = [&](std::span<const std::size_t> rows, long) {
        StepPlan sp;
        sp.batch.texts = gather_texts(rows, train);
        std::vector<std::size_t> corpus_rows;
        for (auto r : rows) {
          sp.batch.ids.push_back(train[r]);
          corpus_rows.push_back(train[r]);
        }
        std::vector<Eigen::MatrixXd> targets;
        for (std::size_t j = 0; j < m; ++j) {
          for (auto r : corpus_rows) audit(0, j, r);
          targets.push_back(detail::label_rows(corpus, corpus_rows, j));
        }
        sp.loss = [targets, m](const ForwardPass& fp) {
          LossGrad lg;
          lg.d_logits.resize(m);
          double sum = 0.0;
          for (std::size_t j = 0; j < m; ++j) sum += bce_loss(fp.logits[j], targets[j], &lg.d_logits[j]);
          lg.loss = combined_loss(sum, 0.0, 0.0);
          return lg;
        };
        return sp;
      };
      std::function<double(const Model&)> val;
      if (!split.val.empty()) {
        val = [&](const Model& mdl) {
          std::vector<std::string> texts;
          for (auto r : split.val) texts.push_back(corpus.texts[r]);
          const auto emb = mdl.encoder->embed(texts);
          double sum = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            sum += bce_loss(head_forward(emb, mdl.heads[j]), detail::label_rows(corpus, split.val, j));
          }
          return sum;
        };
      }
      fit_epochs(model, train.size(), train_config, mix64(train_config.seed) ^ mix64(1), plan, val, "shared",
                 on_epoch);
      bundle.models.push_back(std::move(model));
      break;
    }
    case ISVariant::kSingle: {
      Model model(make_encoder(encoder_config),
                  {ClassificationHead::make(HeadKind::kMultiLabel, encoder_config.embedding_dim, k,
                                            mix64(train_config.seed) ^ mix64(1000))});
      // One training row per (argument, annotator) pair.
      const auto n_pairs = train.size() * m;
      const auto plan = [&](std::span<const std::size_t> rows, long) {
        StepPlan sp;
        Eigen::MatrixXd targets(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(k));
        for (std::size_t b = 0; b < rows.size(); ++b) {
          const auto arg = train[rows[b] / m];
          const auto j = rows[b] % m;
          audit(0, j, arg);
          sp.batch.texts.push_back(
              format_annotator_input(bundle.annotator_token_format, corpus.annotator_ids[j], corpus.texts[arg]));
          sp.batch.ids.push_back(arg);
          for (std::size_t v = 0; v < k; ++v) {
            targets(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(v)) = corpus.annotation(arg, j, v);
          }
        }
        sp.loss = [targets](const ForwardPass& fp) {
          LossGrad lg;
          lg.d_logits.resize(1);
          lg.loss = combined_loss(bce_loss(fp.logits[0], targets, &lg.d_logits[0]), 0.0, 0.0);
          return lg;
        };
        return sp;
      };
      std::function<double(const Model&)> val;
      if (!split.val.empty()) {
        val = [&](const Model& mdl) {
          double sum = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            std::vector<std::string> texts;
            for (auto r : split.val) {
              texts.push_back(format_annotator_input(bundle.annotator_token_format, corpus.annotator_ids[j],
                                                     corpus.texts[r]));
            }
            sum += bce_loss(mdl.logits(texts), detail::label_rows(corpus, split.val, j));
          }
          return sum / static_cast<double>(m);
        };
      }
      fit_epochs(model, n_pairs, train_config, mix64(train_config.seed) ^ mix64(1), plan, val, "single", on_epoch);
      bundle.models.push_back(std::move(model));
      break;
    }
  }

  if (options.tune_threshold && !split.val.empty()) {
    std::vector<std::string> texts;
    for (auto r : split.val) texts.push_back(corpus.texts[r]);
    const auto scores = annotator_scores(bundle, texts);
    std::vector<std::uint8_t> gold(scores.size());
    for (std::size_t i = 0; i < split.val.size(); ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        for (std::size_t v = 0; v < k; ++v) gold[(i * m + j) * k + v] = corpus.annotation(split.val[i], j, v);
      }
    }
    double best_f1 = -1.0;
    for (int step = 1; step <= 19; ++step) {
      const double t = 0.05 * step;
      std::vector<std::uint8_t> pred(scores.size());
      for (std::size_t x = 0; x < scores.size(); ++x) pred[x] = scores[x] > t ? 1 : 0;
      const auto f1 = prf1(pred, gold).f1;
      if (f1 > best_f1) {
        best_f1 = f1;
        bundle.threshold = t;
      }
    }
  }
  return bundle;
}

// Checkpoint files of a bundle: IS-each writes one per annotator, the other
// variants a single file.
inline std::vector<Checkpoint> bundle_checkpoints(const ISModelBundle& bundle, const nlohmann::json& meta) {
  std::vector<Checkpoint> out;
  for (std::size_t i = 0; i < bundle.models.size(); ++i) {
    nlohmann::json m = meta;
    m["family"] = "IS";
    m["variant"] = to_string(bundle.variant);
    m["annotator_ids"] = bundle.annotator_ids;
    m["value_names"] = bundle.value_names;
    m["annotator_token_format"] = bundle.annotator_token_format;
    m["threshold"] = bundle.threshold;
    m["model_index"] = i;
    if (bundle.variant == ISVariant::kEach) m["annotator_id"] = bundle.annotator_ids[i];
    out.push_back(model_checkpoint(bundle.models[i], m));
  }
  return out;
}

inline ISModelBundle bundle_from_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw CheckpointError("no IS checkpoints");
  ISModelBundle bundle;
  const auto& meta = ckpts.front().meta;
  if (meta.value("family", "") != "IS") throw CheckpointError("checkpoint is not an IS model");
  bundle.variant = parse_is_variant(meta.at("variant").get<std::string>());
  bundle.annotator_ids = meta.at("annotator_ids").get<std::vector<std::string>>();
  bundle.value_names = meta.at("value_names").get<std::vector<std::string>>();
  bundle.annotator_token_format = meta.at("annotator_token_format").get<std::string>();
  bundle.threshold = meta.at("threshold").get<double>();
  const std::size_t expected = bundle.variant == ISVariant::kEach ? bundle.annotator_ids.size() : 1;
  if (ckpts.size() != expected) {
    throw CheckpointError("IS-" + to_string(bundle.variant) + " expects " + std::to_string(expected) +
                          " checkpoints, got " + std::to_string(ckpts.size()));
  }
  std::vector<const Checkpoint*> ordered(expected, nullptr);
  for (const auto& c : ckpts) {
    const auto idx = c.meta.at("model_index").get<std::size_t>();
    if (idx >= expected || ordered[idx]) throw CheckpointError("inconsistent IS checkpoint indices");
    ordered[idx] = &c;
  }
  for (const auto* c : ordered) bundle.models.push_back(model_from_checkpoint(*c));
  return bundle;
}

}  // namespace subjlab

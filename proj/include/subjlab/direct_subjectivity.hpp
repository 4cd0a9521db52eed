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

// Direct subjectivity: one binary classifier per value, trained on the
// derived subjectivity labels.
//
//   simple - BCE only.
//   sup    - BCE + lambda * triplet loss on unit-normalized embeddings, with
//            triplets sampled inside each batch.
//   unsup  - BCE + lambda * softmax-contrast ("tension") loss between each
//            text and a positive view of it: a second forward pass with
//            dropout noise (default) or a paraphrase.

#pragma once

#include <string>
#include <vector>

#include "subjlab/corpus.hpp"
#include "subjlab/encoder.hpp"
#include "subjlab/losses.hpp"
#include "subjlab/paraphrase.hpp"

namespace subjlab {

enum class DSVariant { kSimple, kSup, kUnsup };

inline std::string to_string(DSVariant v) {
  switch (v) {
    case DSVariant::kSimple: return "simple";
    case DSVariant::kSup: return "sup";
    case DSVariant::kUnsup: return "unsup";
  }
  return "?";
}

inline DSVariant parse_ds_variant(const std::string& s) {
  if (s == "simple") return DSVariant::kSimple;
  if (s == "sup") return DSVariant::kSup;
  if (s == "unsup") return DSVariant::kUnsup;
  throw ConfigError("unknown DS variant '" + s + "' (expected simple, sup, or unsup)");
}

enum class PositivePolicy { kDropout, kParaphrase };

inline std::string to_string(PositivePolicy p) { return p == PositivePolicy::kDropout ? "dropout" : "paraphrase"; }

inline PositivePolicy parse_positive_policy(const std::string& s) {
  if (s == "dropout") return PositivePolicy::kDropout;
  if (s == "paraphrase") return PositivePolicy::kParaphrase;
  throw ConfigError("unknown positive-pair policy '" + s + "' (expected dropout or paraphrase)");
}

// Per-variant defaults: batch 16 / 5 epochs for simple and sup, batch 64 /
// 5 epochs for unsup; contrastive weight 1.0 for sup and 5.0 for unsup.
inline TrainConfig default_ds_train_config(DSVariant v) {
  TrainConfig c;
  c.epochs = 5;
  c.batch_size = v == DSVariant::kUnsup ? 64 : 16;
  c.lambda_cl = v == DSVariant::kSimple ? 0.0 : (v == DSVariant::kSup ? 1.0 : 5.0);
  c.margin = 1.0;
  c.temperature = 0.1;
  return c;
}

struct DSOptions {
  PositivePolicy positive_policy = PositivePolicy::kDropout;
  bool augment = false;
  // Paraphraser for augmentation and the paraphrase positive policy; word
  // dropout when null.
  ParaphraseClient* paraphraser = nullptr;
  AugmentOptions augment_options;
  double threshold = 0.5;
  bool tune_threshold = false;
  EpochCallback on_epoch;
};

// One (text, subjectivity) pair per argument in `rows`. With `augment`, the
// minority class is oversampled by paraphrasing; callers pass training rows
// only.
inline std::vector<LabeledText> make_binary_dataset(const Corpus& corpus, std::span<const std::size_t> rows,
                                                    std::size_t value, bool augment,
                                                    ParaphraseClient* paraphraser = nullptr,
                                                    const AugmentOptions& augment_options = {},
                                                    std::vector<std::string>* warnings = nullptr) {
  corpus.check_value(value);
  std::vector<LabeledText> pairs;
  pairs.reserve(rows.size());
  for (auto r : rows) pairs.push_back({corpus.texts.at(r), corpus.subjective(r, value), false, r});
  if (!augment) return pairs;
  auto result = augment_minority(pairs, paraphraser, augment_options);
  if (warnings) warnings->insert(warnings->end(), result.warnings.begin(), result.warnings.end());
  return std::move(result.items);
}

struct DSModel {
  DSVariant variant = DSVariant::kSimple;
  std::size_t value_index = 0;
  std::string value_name;
  Model model;
  double threshold = 0.5;
  PositivePolicy positive_policy = PositivePolicy::kDropout;
  std::vector<EpochRecord> log;
  std::vector<std::string> warnings;
};

struct DSPrediction {
  std::vector<std::uint8_t> labels;
  std::vector<double> scores;
};

// score = sigmoid(logit); label = score > threshold (strict).
inline DSPrediction predict_ds(const DSModel& m, std::span<const std::string> texts,
                               std::optional<double> threshold = std::nullopt) {
  const double t = threshold.value_or(m.threshold);
  DSPrediction out;
  if (texts.empty()) return out;
  const auto logits = m.model.logits(texts);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double s = sigmoid(logits(i, 0));
    out.scores.push_back(s);
    out.labels.push_back(s > t ? 1 : 0);
  }
  return out;
}

namespace detail {

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

inline void scatter_add(Eigen::MatrixXd& into, std::span<const std::size_t> idx, const Eigen::MatrixXd& rows) {
  for (std::size_t r = 0; r < idx.size(); ++r) into.row(static_cast<Eigen::Index>(idx[r])) += rows.row(static_cast<Eigen::Index>(r));
}

}  // namespace detail

// Loss of one DS batch given the forward pass over [anchors; positives]
// (positives present for unsup only). Gradients are w.r.t. the raw
// embeddings and the logits.
struct DSBatchLoss {
  LossGrad grad;
  bool cl_skipped = false;
};

inline DSBatchLoss ds_batch_loss(DSVariant variant, const ForwardPass& fp, std::span<const std::uint8_t> labels,
                                 const TrainConfig& cfg, std::uint64_t triplet_seed) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  DSBatchLoss out;
  auto& lg = out.grad;
  Eigen::MatrixXd y(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) y(i, 0) = labels[static_cast<std::size_t>(i)];
  Eigen::MatrixXd d_logit_anchor;
  const double bce = bce_loss(fp.logits[0].topRows(n), y, &d_logit_anchor);
  lg.d_logits.assign(1, Eigen::MatrixXd::Zero(fp.logits[0].rows(), 1));
  lg.d_logits[0].topRows(n) = d_logit_anchor;
  lg.d_embeddings = Eigen::MatrixXd::Zero(fp.embeddings.rows(), fp.embeddings.cols());

  double cl = 0.0;
  if (variant == DSVariant::kSup) {
    const Eigen::MatrixXd raw = fp.embeddings.topRows(n);
    const auto norm = normalize(raw);
    const auto triplets = sample_triplets(labels, triplet_seed);
    if (triplets.skipped) {
      out.cl_skipped = true;
    } else {
      TripletGrad tg;
      cl = triplet_loss(detail::gather_rows(norm.unit, triplets.anchor), detail::gather_rows(norm.unit, triplets.positive),
                        detail::gather_rows(norm.unit, triplets.negative), cfg.margin, &tg);
      Eigen::MatrixXd g_unit = Eigen::MatrixXd::Zero(n, raw.cols());
      detail::scatter_add(g_unit, triplets.anchor, tg.anchor);
      detail::scatter_add(g_unit, triplets.positive, tg.positive);
      detail::scatter_add(g_unit, triplets.negative, tg.negative);
      lg.d_embeddings.topRows(n) = cfg.lambda_cl * normalize_backward(raw, norm.unit, g_unit);
    }
  } else if (variant == DSVariant::kUnsup) {
    if (n < 2 || fp.embeddings.rows() < 2 * n) {
      out.cl_skipped = true;
    } else {
      std::vector<std::size_t> positive_of(static_cast<std::size_t>(n));
      for (std::size_t i = 0; i < positive_of.size(); ++i) positive_of[i] = positive_of.size() + i;
      Eigen::MatrixXd g;
      cl = tension_loss(fp.embeddings, positive_of, cfg.temperature, &g);
      lg.d_embeddings = cfg.lambda_cl * g;
    }
  }
  lg.loss = combined_loss(bce, cl, cfg.lambda_cl);
  return out;
}

inline DSModel train_ds(const Corpus& corpus, const SplitSpec& split, std::size_t value, DSVariant variant,
                        const EncoderConfig& encoder_config, const TrainConfig& train_config,
                        const DSOptions& options = {}) {
  validate(encoder_config);
  validate(train_config);
  corpus.check_value(value);

  DSModel ds;
  ds.variant = variant;
  ds.value_index = value;
  ds.value_name = corpus.values.names[value];
  ds.threshold = options.threshold;
  ds.positive_policy = options.positive_policy;

  AugmentOptions aug = options.augment_options;
  aug.seed = mix64(aug.seed) ^ mix64(train_config.seed) ^ mix64(value + 77);
  const auto data =
      make_binary_dataset(corpus, split.train, value, options.augment, options.paraphraser, aug, &ds.warnings);
  if (data.empty()) throw ConfigError("DS training needs training rows");
  bool has_pos = false, has_neg = false;
  for (const auto& d : data) (d.label ? has_pos : has_neg) = true;
  if (variant == DSVariant::kSup && !(has_pos && has_neg)) {
    ds.warnings.push_back("training slice of value " + ds.value_name +
                          " has a single class; contrastive term is 0 and training reduces to BCE");
  }

  ds.model = Model(make_encoder(encoder_config),
                   {ClassificationHead::make(HeadKind::kBinary, encoder_config.embedding_dim, 1,
                                             mix64(train_config.seed) ^ mix64(2000 + value))});

  WordDropoutParaphraser dropout_paraphraser(mix64(train_config.seed) ^ 0x9a7aULL);
  ParaphraseClient* positive_client = options.paraphraser ? options.paraphraser : &dropout_paraphraser;

  const auto plan = [&](std::span<const std::size_t> rows, long step) {
    StepPlan sp;
    std::vector<std::uint8_t> labels;
    for (auto r : rows) {
      sp.batch.texts.push_back(data[r].text);
      sp.batch.ids.push_back(data[r].source);
      labels.push_back(data[r].label);
    }
    sp.batch.noisy.assign(rows.size(), 0);
    if (variant == DSVariant::kUnsup) {
      for (std::size_t b = 0; b < rows.size(); ++b) {
        if (options.positive_policy == PositivePolicy::kDropout) {
          sp.batch.texts.push_back(data[rows[b]].text);
          sp.batch.noisy.push_back(1);
        } else {
          ParaphraseRequest req{data[rows[b]].text, 1, options.augment_options.decode,
                                mix64(static_cast<std::uint64_t>(step)) ^ rows[b]};
          std::vector<std::string> cands;
          try {
            cands = positive_client->paraphrase(req);
          } catch (const Error& e) {
            ds.warnings.push_back(std::string("positive paraphrase failed: ") + e.what());
            cands = dropout_paraphraser.paraphrase(req);
          }
          sp.batch.texts.push_back(cands.empty() ? data[rows[b]].text : cands.front());
          sp.batch.noisy.push_back(0);
        }
        sp.batch.ids.push_back(data[rows[b]].source);
      }
    }
    const auto triplet_seed = mix64(train_config.seed) ^ mix64(static_cast<std::uint64_t>(step) + 0x3170ULL);
    // The skip flag is only known once the loss runs; sample here to report it.
    if (variant == DSVariant::kSup) sp.cl_skipped = sample_triplets(labels, triplet_seed).skipped;
    if (variant == DSVariant::kUnsup) sp.cl_skipped = rows.size() < 2;
    const auto cfg = train_config;
    sp.loss = [variant, labels, cfg, triplet_seed](const ForwardPass& fp) {
      return ds_batch_loss(variant, fp, labels, cfg, triplet_seed).grad;
    };
    return sp;
  };

  std::function<double(const Model&)> val;
  if (!split.val.empty()) {
    val = [&](const Model& mdl) {
      std::vector<std::string> texts;
      std::vector<std::uint8_t> y;
      for (auto r : split.val) {
        texts.push_back(corpus.texts[r]);
        y.push_back(corpus.subjective(r, value));
      }
      const auto logits = mdl.logits(texts);
      std::vector<double> z(logits.data(), logits.data() + logits.size());
      return bce_loss(z, y);
    };
  }
  const auto on_epoch = [&](const EpochRecord& r) {
    ds.log.push_back(r);
    if (options.on_epoch) options.on_epoch(r);
  };
  fit_epochs(ds.model, data.size(), train_config, mix64(train_config.seed) ^ mix64(value + 11), plan, val,
             "value:" + ds.value_name, on_epoch);

  std::size_t skipped = 0;
  for (const auto& r : ds.log) skipped += r.skipped_cl_batches;
  if (variant != DSVariant::kSimple && skipped > 0) {
    ds.warnings.push_back(std::to_string(skipped) + " batches had no contrastive term");
  }

  if (options.tune_threshold && !split.val.empty()) {
    std::vector<std::string> texts;
    std::vector<std::uint8_t> gold;
    for (auto r : split.val) {
      texts.push_back(corpus.texts[r]);
      gold.push_back(corpus.subjective(r, value));
    }
    const auto pred = predict_ds(ds, texts);
    double best = -1.0;
    for (int s = 1; s <= 19; ++s) {
      const double t = 0.05 * s;
      std::vector<std::uint8_t> labels;
      for (double sc : pred.scores) labels.push_back(sc > t ? 1 : 0);
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        tp += labels[i] && gold[i];
        fp += labels[i] && !gold[i];
        fn += !labels[i] && gold[i];
      }
      const double f1 = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
      if (f1 > best) {
        best = f1;
        ds.threshold = t;
      }
    }
  }
  return ds;
}

inline Checkpoint ds_checkpoint(const DSModel& ds, nlohmann::json meta) {
  meta["family"] = "DS";
  meta["variant"] = to_string(ds.variant);
  meta["value_index"] = ds.value_index;
  meta["value_name"] = ds.value_name;
  meta["threshold"] = ds.threshold;
  meta["positive_policy"] = to_string(ds.positive_policy);
  return model_checkpoint(ds.model, std::move(meta));
}

inline DSModel ds_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("family", "") != "DS") throw CheckpointError("checkpoint is not a DS model");
  DSModel ds;
  ds.variant = parse_ds_variant(ckpt.meta.at("variant").get<std::string>());
  ds.value_index = ckpt.meta.at("value_index").get<std::size_t>();
  ds.value_name = ckpt.meta.at("value_name").get<std::string>();
  ds.threshold = ckpt.meta.at("threshold").get<double>();
  ds.positive_policy = parse_positive_policy(ckpt.meta.value("positive_policy", "dropout"));
  ds.model = model_from_checkpoint(ckpt);
  return ds;
}

}  // namespace subjlab

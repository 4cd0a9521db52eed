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

// Text encoders, classification heads, optimizers, and the shared training
// step used by both method families.
//
// Two backends ship with the library:
//   * "toy": a trainable table of per-token vectors, mean-pooled. A token
//     missing from the table starts from a vector drawn from a generator
//     seeded by the hash of the token string, so embeddings are fully
//     deterministic and need no downloads.
//   * "http": a frozen pretrained encoder served by an external model
//     runtime. Only the classification heads train on top of it.

#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "subjlab/http.hpp"
#include "json.hpp"
#include "subjlab/error.hpp"
#include "subjlab/losses.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

struct EncoderConfig {
  std::string backend_id = "toy";
  std::size_t max_sequence_length = 128;
  std::size_t embedding_dim = 32;
  std::string pooling = "mean";
  bool trainable = true;
  // Toy backend: hash seed for initial token vectors.
  std::uint64_t seed = 0;
  // Dropout applied to token vectors on stochastic passes.
  double dropout = 0.1;
  // Remote backend.
  std::string url = "http://127.0.0.1:8099";
  std::string model_id = "bert-base-uncased";
  std::string revision = "main";
  double timeout_seconds = 30.0;
};

inline void validate(const EncoderConfig& c) {
  if (c.max_sequence_length < 1) throw ConfigError("max_sequence_length must be at least 1");
  if (c.embedding_dim < 1) throw ConfigError("embedding_dim must be positive");
  if (c.pooling != "mean") throw ConfigError("only mean pooling is supported");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
}

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-5;
  std::size_t epochs = 10;
  std::string optimizer_id = "adamw";
  std::uint64_t seed = 0;
  double lambda_cl = 0.0;
  double margin = 1.0;
  double temperature = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (c.epochs < 1) throw ConfigError("epochs must be positive");
  if (!(c.learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
  if (!(c.lambda_cl >= 0.0)) throw ConfigError("lambda_cl must be non-negative");
  if (!(c.margin >= 0.0)) throw ConfigError("margin must be non-negative");
  if (!(c.temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (c.optimizer_id != "adamw" && c.optimizer_id != "sgd") {
    throw ConfigError("unknown optimizer '" + c.optimizer_id + "' (expected adamw or sgd)");
  }
}

// ---------------------------------------------------------------------------
// Optimizer

// AdamW with decoupled weight decay, or plain SGD. Parameters are addressed by
// string key; moment buffers are created lazily, so a parameter only moves on
// steps where it received a gradient (sparse rows of the token table).
class Optimizer {
 public:
  explicit Optimizer(TrainConfig config) : config_(std::move(config)) { validate(config_); }

  void begin_step() { ++step_; }
  long step() const { return step_; }

  void update(const std::string& key, double* param, const double* grad, std::size_t n) {
    const double lr = config_.learning_rate;
    if (config_.optimizer_id == "sgd") {
      for (std::size_t i = 0; i < n; ++i) param[i] -= lr * grad[i];
      return;
    }
    auto& st = state_[key];
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = b1 * st.m[i] + (1.0 - b1) * grad[i];
      st.v[i] = b2 * st.v[i] + (1.0 - b2) * grad[i] * grad[i];
      const double m_hat = st.m[i] / c1;
      const double v_hat = st.v[i] / c2;
      param[i] -= lr * (m_hat / (std::sqrt(v_hat) + config_.epsilon) + config_.weight_decay * param[i]);
    }
  }

  const TrainConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  TrainConfig config_;
  long step_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Heads

enum class HeadKind { kMultiLabel, kBinary };

struct ClassificationHead {
  HeadKind kind = HeadKind::kBinary;
  Eigen::MatrixXd weight;  // [embedding_dim x out_dim]
  Eigen::VectorXd bias;    // [out_dim]

  std::size_t out_dim() const { return static_cast<std::size_t>(weight.cols()); }
  std::size_t in_dim() const { return static_cast<std::size_t>(weight.rows()); }

  static ClassificationHead make(HeadKind kind, std::size_t in_dim, std::size_t k,
                                 std::uint64_t seed) {
    const std::size_t out = kind == HeadKind::kBinary ? 1 : k;
    if (out < 1) throw ConfigError("multi-label head needs at least one output");
    ClassificationHead h;
    h.kind = kind;
    h.weight.resize(static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(out));
    h.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (Eigen::Index c = 0; c < h.weight.cols(); ++c) {
      for (Eigen::Index r = 0; r < h.weight.rows(); ++r) h.weight(r, c) = scale * rng.normal();
    }
    return h;
  }
};

// logits = embeddings * W + b, no activation.
inline Eigen::MatrixXd head_forward(const Eigen::MatrixXd& embeddings, const ClassificationHead& head) {
  if (static_cast<std::size_t>(embeddings.cols()) != head.in_dim()) {
    throw ShapeError("head expects embedding dim " + std::to_string(head.in_dim()) + ", got " +
                     std::to_string(embeddings.cols()));
  }
  if (head.bias.size() != head.weight.cols()) throw ShapeError("head bias/weight mismatch");
  Eigen::MatrixXd logits = embeddings * head.weight;
  logits.rowwise() += head.bias.transpose();
  return logits;
}

// ---------------------------------------------------------------------------
// Encoders

// Per-row record of a training forward pass, consumed by backward().
struct EncodeTrace {
  std::vector<std::vector<std::string>> tokens;
  // Dropout masks per row, [n_tokens x dim] already scaled by 1/(1-p); empty
  // when the row was encoded without noise.
  std::vector<Eigen::MatrixXd> masks;
};

using TokenGrads = std::map<std::string, Eigen::VectorXd>;

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual const EncoderConfig& config() const = 0;
  std::size_t dim() const { return config().embedding_dim; }
  virtual bool trainable() const = 0;

  // Deterministic evaluation-mode embeddings, one row per text.
  virtual Eigen::MatrixXd embed(std::span<const std::string> texts) const = 0;

  // Training forward pass. Rows with noisy[i] set draw dropout from `rng`.
  virtual Eigen::MatrixXd forward(std::span<const std::string> texts,
                                  const std::vector<std::uint8_t>& noisy, Rng& rng,
                                  EncodeTrace& trace) const = 0;
  virtual void backward(const EncodeTrace& trace, const Eigen::MatrixXd& grad_embeddings,
                        TokenGrads& grads) const = 0;
  virtual void apply(const TokenGrads& grads, Optimizer& optimizer, const std::string& prefix) = 0;

  virtual std::unique_ptr<Encoder> clone() const = 0;

  // Parameter export for checkpoints: (meta, tensor).
  virtual nlohmann::json state_meta() const = 0;
  virtual Eigen::MatrixXd state_tensor() const = 0;
  virtual void load_state(const nlohmann::json& meta, const Eigen::MatrixXd& tensor) = 0;
};

inline void check_texts(std::span<const std::string> texts) {
  for (const auto& t : texts) {
    if (!is_valid_utf8(t)) throw EncodingError("input text is not valid UTF-8");
  }
}

class ToyEncoder final : public Encoder {
 public:
  explicit ToyEncoder(EncoderConfig config) : config_(std::move(config)) { validate(config_); }

  const EncoderConfig& config() const override { return config_; }
  bool trainable() const override { return config_.trainable; }

  std::vector<std::string> tokenize(std::string_view text) const {
    auto tokens = split_whitespace(text);
    if (tokens.size() > config_.max_sequence_length) tokens.resize(config_.max_sequence_length);
    return tokens;
  }

  // Initial vector of a token: N(0, 1/dim) components from a generator seeded
  // by the token hash.
  Eigen::VectorXd initial_vector(const std::string& token) const {
    const auto d = static_cast<Eigen::Index>(config_.embedding_dim);
    Eigen::VectorXd v(d);
    Rng rng(fnv1a64(token, config_.seed));
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (Eigen::Index i = 0; i < d; ++i) v(i) = scale * rng.normal();
    return v;
  }

  Eigen::VectorXd token_vector(const std::string& token) const {
    const auto it = table_.find(token);
    return it != table_.end() ? it->second : initial_vector(token);
  }

  Eigen::MatrixXd embed(std::span<const std::string> texts) const override {
    check_texts(texts);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(texts.size()),
                                                static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < texts.size(); ++i) {
      const auto tokens = tokenize(texts[i]);
      if (tokens.empty()) continue;
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim()));
      for (const auto& t : tokens) sum += token_vector(t);
      out.row(static_cast<Eigen::Index>(i)) = sum / static_cast<double>(tokens.size());
    }
    return out;
  }

  Eigen::MatrixXd forward(std::span<const std::string> texts, const std::vector<std::uint8_t>& noisy,
                          Rng& rng, EncodeTrace& trace) const override {
    check_texts(texts);
    const auto d = static_cast<Eigen::Index>(dim());
    const double keep = 1.0 - config_.dropout;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(texts.size()), d);
    trace.tokens.assign(texts.size(), {});
    trace.masks.assign(texts.size(), {});
    for (std::size_t i = 0; i < texts.size(); ++i) {
      auto tokens = tokenize(texts[i]);
      const bool noise = i < noisy.size() && noisy[i] && config_.dropout > 0.0;
      Eigen::MatrixXd mask;
      if (noise) mask.resize(static_cast<Eigen::Index>(tokens.size()), d);
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        Eigen::VectorXd v = token_vector(tokens[t]);
        if (noise) {
          for (Eigen::Index c = 0; c < d; ++c) {
            const double m = rng.uniform() < keep ? 1.0 / keep : 0.0;
            mask(static_cast<Eigen::Index>(t), c) = m;
            v(c) *= m;
          }
        }
        sum += v;
      }
      if (!tokens.empty()) out.row(static_cast<Eigen::Index>(i)) = sum / static_cast<double>(tokens.size());
      trace.tokens[i] = std::move(tokens);
      trace.masks[i] = std::move(mask);
    }
    return out;
  }

  void backward(const EncodeTrace& trace, const Eigen::MatrixXd& grad_embeddings,
                TokenGrads& grads) const override {
    for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
      const auto& tokens = trace.tokens[i];
      if (tokens.empty()) continue;
      const Eigen::VectorXd g =
          grad_embeddings.row(static_cast<Eigen::Index>(i)).transpose() / static_cast<double>(tokens.size());
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        auto [it, inserted] = grads.try_emplace(tokens[t], Eigen::VectorXd::Zero(g.size()));
        if (trace.masks[i].size() > 0) {
          it->second += g.cwiseProduct(trace.masks[i].row(static_cast<Eigen::Index>(t)).transpose());
        } else {
          it->second += g;
        }
      }
    }
  }

  void apply(const TokenGrads& grads, Optimizer& optimizer, const std::string& prefix) override {
    if (!config_.trainable) return;
    for (const auto& [token, g] : grads) {
      auto it = table_.find(token);
      if (it == table_.end()) it = table_.emplace(token, initial_vector(token)).first;
      optimizer.update(prefix + "tok:" + token, it->second.data(), g.data(), static_cast<std::size_t>(g.size()));
    }
  }

  std::unique_ptr<Encoder> clone() const override { return std::make_unique<ToyEncoder>(*this); }

  nlohmann::json state_meta() const override {
    nlohmann::json tokens = nlohmann::json::array();
    for (const auto& [t, v] : table_) tokens.push_back(t);
    return {{"tokens", tokens}};
  }

  Eigen::MatrixXd state_tensor() const override {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(table_.size()), static_cast<Eigen::Index>(dim()));
    Eigen::Index r = 0;
    for (const auto& [t, v] : table_) m.row(r++) = v.transpose();
    return m;
  }

  void load_state(const nlohmann::json& meta, const Eigen::MatrixXd& tensor) override {
    const auto& tokens = meta.at("tokens");
    if (static_cast<Eigen::Index>(tokens.size()) != tensor.rows() ||
        (tensor.rows() > 0 && tensor.cols() != static_cast<Eigen::Index>(dim()))) {
      throw CheckpointError("toy encoder table shape does not match its token list");
    }
    table_.clear();
    for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
      table_.emplace(tokens[static_cast<std::size_t>(r)].get<std::string>(), tensor.row(r).transpose());
    }
  }

  std::size_t table_size() const { return table_.size(); }

 private:
  EncoderConfig config_;
  std::map<std::string, Eigen::VectorXd> table_;
};

// Frozen encoder behind an HTTP embedding service. The service receives
// POST /embed {"model", "revision", "texts", "max_sequence_length",
// "pooling"} and answers {"embeddings": [[...], ...]}.
class RemoteEncoder final : public Encoder {
 public:
  explicit RemoteEncoder(EncoderConfig config) : config_(std::move(config)) {
    validate(config_);
    config_.trainable = false;
  }

  const EncoderConfig& config() const override { return config_; }
  bool trainable() const override { return false; }

  Eigen::MatrixXd embed(std::span<const std::string> texts) const override {
    check_texts(texts);
    nlohmann::json req{{"model", config_.model_id},
                       {"revision", config_.revision},
                       {"texts", std::vector<std::string>(texts.begin(), texts.end())},
                       {"max_sequence_length", config_.max_sequence_length},
                       {"pooling", config_.pooling}};
    httplib::Client client(config_.url);
    const auto secs = static_cast<time_t>(config_.timeout_seconds);
    client.set_connection_timeout(secs, 0);
    client.set_read_timeout(secs, 0);
    auto res = client.Post("/embed", req.dump(), "application/json");
    if (!res) throw BackendError("embedding service " + config_.url + " unreachable");
    if (res->status != 200) throw BackendError("embedding service returned HTTP " + std::to_string(res->status));
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("embedding service sent invalid JSON: ") + e.what());
    }
    const auto& rows = doc.at("embeddings");
    if (rows.size() != texts.size()) throw BackendError("embedding service returned wrong row count");
    Eigen::MatrixXd out(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(dim()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != dim()) throw BackendError("embedding service returned wrong dimension");
      for (std::size_t c = 0; c < dim(); ++c) {
        out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c].get<double>();
      }
    }
    return out;
  }

  Eigen::MatrixXd forward(std::span<const std::string> texts, const std::vector<std::uint8_t>&, Rng&,
                          EncodeTrace& trace) const override {
    trace = {};
    return embed(texts);
  }
  void backward(const EncodeTrace&, const Eigen::MatrixXd&, TokenGrads&) const override {}
  void apply(const TokenGrads&, Optimizer&, const std::string&) override {}

  std::unique_ptr<Encoder> clone() const override { return std::make_unique<RemoteEncoder>(*this); }
  nlohmann::json state_meta() const override { return nlohmann::json::object(); }
  Eigen::MatrixXd state_tensor() const override { return {}; }
  void load_state(const nlohmann::json&, const Eigen::MatrixXd&) override {}

 private:
  EncoderConfig config_;
};

using EncoderFactory = std::function<std::unique_ptr<Encoder>(const EncoderConfig&)>;

class BackendRegistry {
 public:
  static BackendRegistry& instance() {
    static BackendRegistry registry;
    return registry;
  }

  void add(const std::string& id, EncoderFactory factory) {
    std::lock_guard lock(mu_);
    factories_[id] = std::move(factory);
  }

  std::unique_ptr<Encoder> make(const EncoderConfig& config) const {
    EncoderFactory f;
    {
      std::lock_guard lock(mu_);
      const auto it = factories_.find(config.backend_id);
      if (it == factories_.end()) throw BackendError("unknown encoder backend '" + config.backend_id + "'");
      f = it->second;
    }
    return f(config);
  }

 private:
  BackendRegistry() {
    factories_["toy"] = [](const EncoderConfig& c) { return std::make_unique<ToyEncoder>(c); };
    factories_["http"] = [](const EncoderConfig& c) { return std::make_unique<RemoteEncoder>(c); };
  }
  mutable std::mutex mu_;
  std::map<std::string, EncoderFactory> factories_;
};

inline std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config) {
  return BackendRegistry::instance().make(config);
}

// ---------------------------------------------------------------------------
// Model and training step

// An encoder plus one or more heads. Copies are deep.
struct Model {
  std::unique_ptr<Encoder> encoder;
  std::vector<ClassificationHead> heads;

  Model() = default;
  Model(std::unique_ptr<Encoder> enc, std::vector<ClassificationHead> h)
      : encoder(std::move(enc)), heads(std::move(h)) {}
  Model(const Model& o) : encoder(o.encoder ? o.encoder->clone() : nullptr), heads(o.heads) {}
  Model& operator=(const Model& o) {
    if (this != &o) {
      encoder = o.encoder ? o.encoder->clone() : nullptr;
      heads = o.heads;
    }
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  Eigen::MatrixXd logits(std::span<const std::string> texts, std::size_t head = 0) const {
    return head_forward(encoder->embed(texts), heads.at(head));
  }
};

struct Batch {
  std::vector<std::string> texts;
  // Rows encoded with dropout noise.
  std::vector<std::uint8_t> noisy;
  // Caller-side ids of the rows, reported on divergence.
  std::vector<std::size_t> ids;
};

struct ForwardPass {
  Eigen::MatrixXd embeddings;
  std::vector<Eigen::MatrixXd> logits;  // one per head
};

struct LossGrad {
  LossBreakdown loss;
  Eigen::MatrixXd d_embeddings;            // may be empty (no direct term)
  std::vector<Eigen::MatrixXd> d_logits;   // one per head; empty matrix = no gradient
};

using LossFn = std::function<LossGrad(const ForwardPass&)>;

inline ForwardPass forward_pass(const Model& model, const Batch& batch, Rng& noise, EncodeTrace& trace) {
  ForwardPass fp;
  fp.embeddings = model.encoder->forward(batch.texts, batch.noisy, noise, trace);
  for (const auto& h : model.heads) fp.logits.push_back(head_forward(fp.embeddings, h));
  return fp;
}

// One gradient update. Returns the loss components of the batch before the
// update. Throws DivergenceError when the loss is not finite.
inline LossBreakdown train_step(Model& model, const Batch& batch, const LossFn& loss_fn,
                                Optimizer& optimizer, Rng& noise) {
  EncodeTrace trace;
  const auto fp = forward_pass(model, batch, noise, trace);
  const auto lg = loss_fn(fp);
  if (!std::isfinite(lg.loss.total) || !std::isfinite(lg.loss.bce) || !std::isfinite(lg.loss.cl)) {
    throw DivergenceError("non-finite training loss", batch.ids);
  }
  const auto n = fp.embeddings.rows();
  const auto d = fp.embeddings.cols();
  Eigen::MatrixXd d_emb = lg.d_embeddings.size() > 0 ? lg.d_embeddings : Eigen::MatrixXd::Zero(n, d);

  std::vector<Eigen::MatrixXd> d_weight(model.heads.size());
  std::vector<Eigen::VectorXd> d_bias(model.heads.size());
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    if (h >= lg.d_logits.size() || lg.d_logits[h].size() == 0) continue;
    const auto& g = lg.d_logits[h];
    d_weight[h] = fp.embeddings.transpose() * g;
    d_bias[h] = g.colwise().sum().transpose();
    d_emb += g * model.heads[h].weight.transpose();
  }
  TokenGrads token_grads;
  if (model.encoder->trainable()) model.encoder->backward(trace, d_emb, token_grads);

  optimizer.begin_step();
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    if (d_weight[h].size() == 0) continue;
    const auto key = "head" + std::to_string(h);
    optimizer.update(key + ".weight", model.heads[h].weight.data(), d_weight[h].data(),
                     static_cast<std::size_t>(d_weight[h].size()));
    optimizer.update(key + ".bias", model.heads[h].bias.data(), d_bias[h].data(),
                     static_cast<std::size_t>(d_bias[h].size()));
  }
  model.encoder->apply(token_grads, optimizer, "encoder.");
  return lg.loss;
}

struct EpochRecord {
  std::string model;
  std::size_t epoch = 0;
  // Batch means over the epoch.
  double bce = 0.0;
  double cl = 0.0;
  double total = 0.0;
  std::optional<double> val_loss;
  // Batches whose contrastive term was skipped (no eligible triplet).
  std::size_t skipped_cl_batches = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct StepPlan {
  Batch batch;
  LossFn loss;
  bool cl_skipped = false;
};

// Runs `config.epochs` passes over rows 0..n_rows-1 in a seeded shuffled
// order. `plan(rows, step)` builds the batch and loss for one step;
// `val_loss`, when set, is evaluated after every epoch.
inline std::vector<EpochRecord> fit_epochs(Model& model, std::size_t n_rows, const TrainConfig& config,
                                           std::uint64_t stream_seed,
                                           const std::function<StepPlan(std::span<const std::size_t>, long)>& plan,
                                           const std::function<double(const Model&)>& val_loss,
                                           const std::string& name, const EpochCallback& on_epoch) {
  validate(config);
  if (n_rows == 0) throw ConfigError("model '" + name + "' has no training rows");
  Optimizer optimizer(config);
  Rng order_rng(mix64(stream_seed) ^ 0x0de7ULL);
  Rng noise_rng(mix64(stream_seed) ^ 0x2015eULL);
  std::vector<std::size_t> order(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i) order[i] = i;
  std::vector<EpochRecord> log;
  long step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.model = name;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n_rows; start += config.batch_size) {
      const auto end = std::min(n_rows, start + config.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      auto sp = plan(rows, step++);
      const auto lb = train_step(model, sp.batch, sp.loss, optimizer, noise_rng);
      rec.bce += lb.bce;
      rec.cl += lb.cl;
      rec.total += lb.total;
      rec.skipped_cl_batches += sp.cl_skipped ? 1 : 0;
      ++batches;
    }
    rec.bce /= static_cast<double>(batches);
    rec.cl /= static_cast<double>(batches);
    rec.total /= static_cast<double>(batches);
    if (val_loss) rec.val_loss = val_loss(model);
    if (on_epoch) on_epoch(rec);
    log.push_back(rec);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'S', 'J', 'L', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic, version, JSON header, then named double tensors
// stored as raw little-endian IEEE-754 so values round-trip bit-exactly.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

  const Eigen::MatrixXd& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw CheckpointError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {
template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint");
  return v;
}
}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, kCheckpointVersion);
  const auto header = ckpt.meta.dump();
  detail::write_pod<std::uint64_t>(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::write_pod<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    detail::write_pod<std::uint64_t>(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
    detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
    // Row-major on disk.
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) detail::write_pod<double>(out, t(r, c));
    }
  }
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError("not a subjlab checkpoint");
  }
  const auto version = detail::read_pod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const auto header_len = detail::read_pod<std::uint64_t>(in);
  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len))) throw CheckpointError("truncated header");
  ckpt.meta = nlohmann::json::parse(header);
  const auto count = detail::read_pod<std::uint64_t>(in);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = detail::read_pod<std::uint64_t>(in);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len))) throw CheckpointError("truncated name");
    const auto rows = detail::read_pod<std::uint64_t>(in);
    const auto cols = detail::read_pod<std::uint64_t>(in);
    Eigen::MatrixXd t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.cols(); ++c) t(r, c) = detail::read_pod<double>(in);
    }
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

inline void write_checkpoint_file(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  write_checkpoint(out, ckpt);
}

inline Checkpoint read_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"backend_id", c.backend_id},     {"max_sequence_length", c.max_sequence_length},
          {"embedding_dim", c.embedding_dim}, {"pooling", c.pooling},
          {"trainable", c.trainable},       {"seed", c.seed},
          {"dropout", c.dropout},           {"url", c.url},
          {"model_id", c.model_id},         {"revision", c.revision},
          {"timeout_seconds", c.timeout_seconds}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.backend_id = j.value("backend_id", c.backend_id);
  c.max_sequence_length = j.value("max_sequence_length", c.max_sequence_length);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.pooling = j.value("pooling", c.pooling);
  c.trainable = j.value("trainable", c.trainable);
  c.seed = j.value("seed", c.seed);
  c.dropout = j.value("dropout", c.dropout);
  c.url = j.value("url", c.url);
  c.model_id = j.value("model_id", c.model_id);
  c.revision = j.value("revision", c.revision);
  c.timeout_seconds = j.value("timeout_seconds", c.timeout_seconds);
  validate(c);
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},     {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},             {"optimizer_id", c.optimizer_id},
          {"seed", c.seed},                 {"lambda_cl", c.lambda_cl},
          {"margin", c.margin},             {"temperature", c.temperature},
          {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2},               {"epsilon", c.epsilon}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.optimizer_id = j.value("optimizer_id", c.optimizer_id);
  c.seed = j.value("seed", c.seed);
  c.lambda_cl = j.value("lambda_cl", c.lambda_cl);
  c.margin = j.value("margin", c.margin);
  c.temperature = j.value("temperature", c.temperature);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  validate(c);
  return c;
}

inline const char* head_kind_name(HeadKind k) { return k == HeadKind::kBinary ? "binary" : "multi_label"; }

// Serializes a model: encoder config echo, encoder parameters, and heads.
inline Checkpoint model_checkpoint(const Model& model, nlohmann::json meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  ckpt.meta["encoder_config"] = to_json(model.encoder->config());
  ckpt.meta["encoder_state"] = model.encoder->state_meta();
  nlohmann::json kinds = nlohmann::json::array();
  for (const auto& h : model.heads) kinds.push_back(head_kind_name(h.kind));
  ckpt.meta["heads"] = kinds;
  ckpt.tensors.emplace_back("encoder.table", model.encoder->state_tensor());
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    ckpt.tensors.emplace_back("head" + std::to_string(h) + ".weight", model.heads[h].weight);
    ckpt.tensors.emplace_back("head" + std::to_string(h) + ".bias", Eigen::MatrixXd(model.heads[h].bias));
  }
  return ckpt;
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model model;
  model.encoder = make_encoder(encoder_config_from_json(ckpt.meta.at("encoder_config")));
  model.encoder->load_state(ckpt.meta.at("encoder_state"), ckpt.tensor("encoder.table"));
  const auto& kinds = ckpt.meta.at("heads");
  for (std::size_t h = 0; h < kinds.size(); ++h) {
    ClassificationHead head;
    head.kind = kinds[h].get<std::string>() == "binary" ? HeadKind::kBinary : HeadKind::kMultiLabel;
    head.weight = ckpt.tensor("head" + std::to_string(h) + ".weight");
    head.bias = ckpt.tensor("head" + std::to_string(h) + ".bias").col(0);
    model.heads.push_back(std::move(head));
  }
  return model;
}

}  // namespace subjlab

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

// Paraphrase generation clients used to oversample the minority class.
//
// A client turns one request {text, n_candidates, decode params} into a list
// of candidate paraphrases. Three transports are provided:
//   * WordDropoutParaphraser: offline, deterministic, reentrant.
//   * HttpParaphraseClient: POSTs a JSON request to a generation server.
//   * SubprocessParaphraseClient: spawns a command per request and speaks
//     one JSON document over stdin/stdout.

#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <memory>
#include <string>
#include <vector>

#include "subjlab/http.hpp"
#include "json.hpp"
#include "subjlab/error.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

// Decoding hyperparameters forwarded to a generative paraphrase model.
struct DecodeParams {
  std::string sampling_method = "top_k";
  double temperature = 2.0;
  int top_k = 40;
  double top_p = 0.85;
  double repetition_penalty = 1.5;
};

struct ParaphraseRequest {
  std::string text;
  std::size_t n_candidates = 1;
  DecodeParams decode;
  // Distinguishes repeated requests for the same text.
  std::uint64_t nonce = 0;
};

inline nlohmann::json to_json(const ParaphraseRequest& r) {
  return nlohmann::json{{"text", r.text},
                        {"n_candidates", r.n_candidates},
                        {"sampling_method", r.decode.sampling_method},
                        {"temperature", r.decode.temperature},
                        {"top_k", r.decode.top_k},
                        {"top_p", r.decode.top_p},
                        {"repetition_penalty", r.decode.repetition_penalty},
                        {"nonce", r.nonce}};
}

inline std::vector<std::string> parse_paraphrase_response(const std::string& body) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("paraphrase response is not JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("paraphrases") || !doc["paraphrases"].is_array()) {
    throw BackendError("paraphrase response lacks a \"paraphrases\" array");
  }
  std::vector<std::string> out;
  for (const auto& p : doc["paraphrases"]) {
    if (!p.is_string()) throw BackendError("paraphrase entries must be strings");
    out.push_back(p.get<std::string>());
  }
  return out;
}

class ParaphraseClient {
 public:
  virtual ~ParaphraseClient() = default;
  virtual std::string name() const = 0;
  // Returns up to n_candidates paraphrases. An empty result means the client
  // has nothing more to offer for this text. Throws BackendError on failure.
  virtual std::vector<std::string> paraphrase(const ParaphraseRequest& request) = 0;
};

// Drops a seeded random subset of at most 15% of the non-initial tokens. The
// output depends only on (seed, text, nonce, candidate index), so concurrent
// calls are safe.
class WordDropoutParaphraser final : public ParaphraseClient {
 public:
  explicit WordDropoutParaphraser(std::uint64_t seed, double max_drop_fraction = 0.15)
      : seed_(seed), max_drop_fraction_(max_drop_fraction) {}

  std::string name() const override { return "word-dropout"; }

  std::vector<std::string> paraphrase(const ParaphraseRequest& request) override {
    std::vector<std::string> out;
    out.reserve(request.n_candidates);
    for (std::size_t c = 0; c < request.n_candidates; ++c) {
      out.push_back(one(request.text, mix64(request.nonce) ^ mix64(c + 0x51ed)));
    }
    return out;
  }

  std::string one(const std::string& text, std::uint64_t salt) const {
    auto tokens = split_whitespace(text);
    if (tokens.size() < 2) return text;
    const std::size_t tail = tokens.size() - 1;
    const auto max_drop = static_cast<std::size_t>(max_drop_fraction_ * static_cast<double>(tail));
    if (max_drop == 0) return join(tokens, " ");
    Rng rng(fnv1a64(text, seed_) ^ salt);
    const std::size_t n_drop = 1 + rng.index(max_drop);
    std::vector<std::size_t> positions(tail);
    for (std::size_t i = 0; i < tail; ++i) positions[i] = i + 1;
    rng.shuffle(positions);
    std::vector<bool> dropped(tokens.size(), false);
    for (std::size_t i = 0; i < n_drop; ++i) dropped[positions[i]] = true;
    std::vector<std::string> kept;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (!dropped[i]) kept.push_back(tokens[i]);
    }
    return join(kept, " ");
  }

 private:
  std::uint64_t seed_;
  double max_drop_fraction_;
};

// Expects the server to answer POST <path> with {"paraphrases": [...]}.
class HttpParaphraseClient final : public ParaphraseClient {
 public:
  HttpParaphraseClient(std::string base_url, std::string path, double timeout_seconds)
      : base_url_(std::move(base_url)), path_(std::move(path)), timeout_(timeout_seconds) {}

  std::string name() const override { return "http:" + base_url_ + path_; }

  std::vector<std::string> paraphrase(const ParaphraseRequest& request) override {
    httplib::Client client(base_url_);
    const auto secs = static_cast<time_t>(timeout_);
    const auto usecs = static_cast<time_t>((timeout_ - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    auto res = client.Post(path_, to_json(request).dump(), "application/json");
    if (!res) {
      throw BackendError("paraphrase server " + base_url_ + " unreachable: " +
                         httplib::to_string(res.error()));
    }
    if (res->status != 200) {
      throw BackendError("paraphrase server returned HTTP " + std::to_string(res->status));
    }
    return parse_paraphrase_response(res->body);
  }

 private:
  std::string base_url_;
  std::string path_;
  double timeout_;
};

// Runs `command` through /bin/sh once per request, writes the request JSON to
// its stdin and reads the response JSON from its stdout.
class SubprocessParaphraseClient final : public ParaphraseClient {
 public:
  explicit SubprocessParaphraseClient(std::string command) : command_(std::move(command)) {}

  std::string name() const override { return "subprocess:" + command_; }

  std::vector<std::string> paraphrase(const ParaphraseRequest& request) override {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0) throw BackendError("pipe() failed");
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw BackendError("pipe() failed");
    }
    const pid_t pid = fork();
    if (pid < 0) {
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) close(fd);
      throw BackendError("fork() failed");
    }
    if (pid == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      for (int fd : {to_child[0], to_child[1], from_child[0], from_child[1]}) close(fd);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);

    // The child may exit without reading; ignore SIGPIPE for the write.
    auto* previous = std::signal(SIGPIPE, SIG_IGN);
    const std::string payload = to_json(request).dump() + "\n";
    std::size_t written = 0;
    while (written < payload.size()) {
      const ssize_t n = write(to_child[1], payload.data() + written, payload.size() - written);
      if (n <= 0) break;
      written += static_cast<std::size_t>(n);
    }
    close(to_child[1]);
    std::signal(SIGPIPE, previous);

    std::string body;
    char buf[4096];
    for (;;) {
      const ssize_t n = read(from_child[0], buf, sizeof(buf));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) break;
      body.append(buf, static_cast<std::size_t>(n));
    }
    close(from_child[0]);
    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      throw BackendError("paraphrase command failed: " + command_);
    }
    return parse_paraphrase_response(body);
  }

 private:
  std::string command_;
};

}  // namespace subjlab

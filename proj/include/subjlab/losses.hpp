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

// Training objectives and their analytic gradients.
//
// Every loss returns its value and, when a gradient pointer is supplied,
// writes d(loss)/d(input) with the same shape as the input. All losses are
// pure functions.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "subjlab/error.hpp"
#include "subjlab/util.hpp"

namespace subjlab {

struct LossBreakdown {
  double bce = 0.0;
  double cl = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

inline LossBreakdown combined_loss(double bce, double cl, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("contrastive weight must be non-negative");
  return {bce, cl, lambda, bce + lambda * cl};
}

// Mean binary cross-entropy over every cell of `logits`, in the stable form
// max(z, 0) - z*y + log(1 + exp(-|z|)). For an [n x k] multi-label target this
// is the mean of the k per-column losses.
inline double bce_loss(const Eigen::MatrixXd& logits, const Eigen::MatrixXd& targets,
                       Eigen::MatrixXd* grad = nullptr) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw ShapeError("bce_loss: logits and targets differ in shape");
  }
  const auto cells = static_cast<double>(logits.size());
  if (grad) grad->resize(logits.rows(), logits.cols());
  if (logits.size() == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double z = logits(i, j);
      const double y = targets(i, j);
      sum += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      if (grad) (*grad)(i, j) = (sigmoid(z) - y) / cells;
    }
  }
  return sum / cells;
}

inline double bce_loss(std::span<const double> logits, std::span<const std::uint8_t> labels) {
  if (logits.size() != labels.size()) throw ShapeError("bce_loss: length mismatch");
  Eigen::MatrixXd z(static_cast<Eigen::Index>(logits.size()), 1);
  Eigen::MatrixXd y(static_cast<Eigen::Index>(logits.size()), 1);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    z(static_cast<Eigen::Index>(i), 0) = logits[i];
    y(static_cast<Eigen::Index>(i), 0) = labels[i];
  }
  return bce_loss(z, y);
}

struct Normalized {
  Eigen::MatrixXd unit;
  std::vector<bool> zero_rows;
  bool any_zero = false;
};

// Row-wise L2 normalization. Zero rows stay zero and are flagged.
inline Normalized normalize(const Eigen::MatrixXd& x) {
  Normalized out{x, std::vector<bool>(static_cast<std::size_t>(x.rows()), false), false};
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0.0) {
      out.unit.row(i) /= n;
    } else {
      out.zero_rows[static_cast<std::size_t>(i)] = true;
      out.any_zero = true;
    }
  }
  return out;
}

// Pulls a gradient w.r.t. normalized rows back to the raw rows:
// dL/dx = (g - (g.u) u) / |x|.
inline Eigen::MatrixXd normalize_backward(const Eigen::MatrixXd& raw, const Eigen::MatrixXd& unit,
                                          const Eigen::MatrixXd& grad_unit) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(raw.rows(), raw.cols());
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double n = raw.row(i).norm();
    if (n == 0.0) continue;
    const double proj = grad_unit.row(i).dot(unit.row(i));
    g.row(i) = (grad_unit.row(i) - proj * unit.row(i)) / n;
  }
  return g;
}

struct TripletGrad {
  Eigen::MatrixXd anchor;
  Eigen::MatrixXd positive;
  Eigen::MatrixXd negative;
};

// Batch mean of max(d(a, p) - d(a, n) + margin, 0) with Euclidean d. Rows are
// expected to be unit-normalized. At the hinge kink (expression exactly 0)
// the gradient of the active branch is returned. The gradient of d at
// coincident points is taken as 0.
inline double triplet_loss(const Eigen::MatrixXd& anchor, const Eigen::MatrixXd& positive,
                           const Eigen::MatrixXd& negative, double margin,
                           TripletGrad* grad = nullptr) {
  if (anchor.rows() != positive.rows() || anchor.rows() != negative.rows() ||
      anchor.cols() != positive.cols() || anchor.cols() != negative.cols()) {
    throw ShapeError("triplet_loss: anchor, positive, negative differ in shape");
  }
  if (!(margin >= 0.0)) throw ConfigError("triplet margin must be non-negative");
  const auto n = anchor.rows();
  if (grad) {
    grad->anchor = Eigen::MatrixXd::Zero(n, anchor.cols());
    grad->positive = Eigen::MatrixXd::Zero(n, anchor.cols());
    grad->negative = Eigen::MatrixXd::Zero(n, anchor.cols());
  }
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd ap = anchor.row(i) - positive.row(i);
    const Eigen::RowVectorXd an = anchor.row(i) - negative.row(i);
    const double d_ap = ap.norm();
    const double d_an = an.norm();
    const double expr = d_ap - d_an + margin;
    if (expr < 0.0) continue;
    sum += expr;
    if (!grad) continue;
    const double scale = 1.0 / static_cast<double>(n);
    Eigen::RowVectorXd g_ap = Eigen::RowVectorXd::Zero(anchor.cols());
    Eigen::RowVectorXd g_an = Eigen::RowVectorXd::Zero(anchor.cols());
    if (d_ap > 0.0) g_ap = ap / d_ap;
    if (d_an > 0.0) g_an = an / d_an;
    grad->anchor.row(i) += scale * (g_ap - g_an);
    grad->positive.row(i) -= scale * g_ap;
    grad->negative.row(i) += scale * g_an;
  }
  return sum / static_cast<double>(n);
}

inline double cosine_similarity(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// Softmax-contrast loss over a batch. Rows 0..N-1 of `z` are the anchors,
// N = positive_of.size(); positive_of[i] is the row of anchor i's positive
// (any row of z). With sim the cosine similarity:
//
//   L = -(1/N) sum_i log( exp(sim(z_i, z_{i+}) / tau)
//                         / sum_{j<N} exp(sim(z_i, z_j) / tau) )
//
// The denominator runs over the N anchors, j = i included.
inline double tension_loss(const Eigen::MatrixXd& z, std::span<const std::size_t> positive_of,
                           double tau, Eigen::MatrixXd* grad = nullptr) {
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  const auto n = static_cast<Eigen::Index>(positive_of.size());
  if (n < 2) throw ShapeError("tension_loss needs at least two anchors");
  if (z.rows() < n) throw ShapeError("tension_loss: fewer rows than anchors");
  for (auto p : positive_of) {
    if (static_cast<Eigen::Index>(p) >= z.rows()) throw ShapeError("tension_loss: positive out of range");
  }
  if (grad) *grad = Eigen::MatrixXd::Zero(z.rows(), z.cols());

  std::vector<double> norms(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) norms[static_cast<std::size_t>(r)] = z.row(r).norm();
  const auto sim = [&](Eigen::Index a, Eigen::Index b) {
    const double na = norms[static_cast<std::size_t>(a)];
    const double nb = norms[static_cast<std::size_t>(b)];
    if (na == 0.0 || nb == 0.0) return 0.0;
    return z.row(a).dot(z.row(b)) / (na * nb);
  };
  // Accumulates coeff * d sim(a, b) into both rows.
  const auto add_sim_grad = [&](Eigen::Index a, Eigen::Index b, double coeff) {
    const double na = norms[static_cast<std::size_t>(a)];
    const double nb = norms[static_cast<std::size_t>(b)];
    if (na == 0.0 || nb == 0.0 || coeff == 0.0) return;
    const double s = z.row(a).dot(z.row(b)) / (na * nb);
    const Eigen::RowVectorXd da = z.row(b) / (na * nb) - s * z.row(a) / (na * na);
    const Eigen::RowVectorXd db = z.row(a) / (na * nb) - s * z.row(b) / (nb * nb);
    grad->row(a) += coeff * da;
    grad->row(b) += coeff * db;
  };

  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  std::vector<double> logits(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double max_logit = -INFINITY;
    for (Eigen::Index j = 0; j < n; ++j) {
      logits[static_cast<std::size_t>(j)] = sim(i, j) / tau;
      max_logit = std::max(max_logit, logits[static_cast<std::size_t>(j)]);
    }
    double denom = 0.0;
    for (double l : logits) denom += std::exp(l - max_logit);
    const double log_denom = max_logit + std::log(denom);
    const auto pos = static_cast<Eigen::Index>(positive_of[static_cast<std::size_t>(i)]);
    total += log_denom - sim(i, pos) / tau;
    if (!grad) continue;
    add_sim_grad(i, pos, -inv_n / tau);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double p = std::exp(logits[static_cast<std::size_t>(j)] - log_denom);
      add_sim_grad(i, j, inv_n * p / tau);
    }
  }
  return total * inv_n;
}

struct TripletBatch {
  std::vector<std::size_t> anchor;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
  // Set when no anchor was eligible (single-class batch or singleton class).
  bool skipped = false;
  std::size_t size() const { return anchor.size(); }
};

// One uniformly drawn positive (same label, not the anchor) and negative
// (other label) per eligible anchor, in anchor order.
inline TripletBatch sample_triplets(std::span<const std::uint8_t> labels, std::uint64_t seed) {
  TripletBatch batch;
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i] ? 1 : 0].push_back(i);
  Rng rng(mix64(seed) ^ 0x7319ULL);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& same = by_class[labels[i] ? 1 : 0];
    const auto& other = by_class[labels[i] ? 0 : 1];
    if (same.size() < 2 || other.empty()) continue;
    // Draw among the same-class rows other than the anchor itself.
    const auto self = static_cast<std::size_t>(std::lower_bound(same.begin(), same.end(), i) - same.begin());
    auto k = rng.index(same.size() - 1);
    if (k >= self) ++k;
    const auto p = same[k];
    batch.anchor.push_back(i);
    batch.positive.push_back(p);
    batch.negative.push_back(other[rng.index(other.size())]);
  }
  batch.skipped = batch.anchor.empty();
  return batch;
}

}  // namespace subjlab

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

#include <cmath>

#include "subjlab/losses.hpp"

using namespace subjlab;
using Eigen::MatrixXd;

namespace {

double scalar_bce(double z, double y) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

MatrixXd rows(std::initializer_list<std::initializer_list<double>> r) {
  MatrixXd m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double x : row) m(i, j++) = x;
    ++i;
  }
  return m;
}

MatrixXd random_unit(Rng& rng, Eigen::Index n, Eigen::Index d) {
  MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return normalize(m).unit;
}

template <typename F>
MatrixXd numeric_grad(const MatrixXd& x, F f, double h = 1e-6) {
  MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    MatrixXd a = x, b = x;
    a.data()[i] += h;
    b.data()[i] -= h;
    g.data()[i] = (f(a) - f(b)) / (2 * h);
  }
  return g;
}

double rel_err(const MatrixXd& a, const MatrixXd& b) {
  return (a - b).norm() / std::max(1e-12, std::max(a.norm(), b.norm()));
}

}  // namespace

TEST(Bce, Examples) {
  EXPECT_NEAR(bce_loss(rows({{0.0}}), rows({{1.0}})), std::log(2.0), 1e-12);
  EXPECT_LT(bce_loss(rows({{50.0}}), rows({{1.0}})), 1e-9);
  const double expect = (scalar_bce(1.2, 1) + scalar_bce(-0.7, 0)) / 2;
  EXPECT_NEAR(expect, 0.333234, 1e-6);
  EXPECT_NEAR(bce_loss(rows({{1.2}, {-0.7}}), rows({{1}, {0}})), expect, 1e-12);
  const std::vector<double> z{1.2, -0.7};
  const std::vector<std::uint8_t> y{1, 0};
  EXPECT_NEAR(bce_loss(z, y), expect, 1e-12);
}

TEST(Bce, StableForHugeLogits) {
  const double l = bce_loss(rows({{-1000.0}, {1000.0}}), rows({{1}, {0}}));
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 1000.0, 1e-9);
  EXPECT_THROW(bce_loss(rows({{1.0}}), rows({{1.0, 0.0}})), ShapeError);
}

TEST(Bce, MultiLabelIsMeanOfColumns) {
  Rng rng(4);
  MatrixXd z(6, 3), y(6, 3);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = 3 * rng.normal();
    y.data()[i] = rng.coin();
  }
  double mean = 0;
  for (Eigen::Index c = 0; c < 3; ++c) mean += bce_loss(z.col(c), y.col(c)) / 3;
  EXPECT_NEAR(bce_loss(z, y), mean, 1e-9);
}

TEST(Bce, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  MatrixXd z(5, 2), y(5, 2);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    z.data()[i] = rng.normal();
    y.data()[i] = rng.coin();
  }
  MatrixXd g;
  bce_loss(z, y, &g);
  EXPECT_LT(rel_err(g, numeric_grad(z, [&](const MatrixXd& x) { return bce_loss(x, y); })), 1e-6);
}

TEST(Normalize, Examples) {
  const auto n = normalize(rows({{3, 4}, {1, 0}, {0, 0}}));
  EXPECT_NEAR(n.unit(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(n.unit(0, 1), 0.8, 1e-15);
  EXPECT_EQ(n.unit(1, 0), 1.0);
  EXPECT_EQ(n.unit(1, 1), 0.0);
  EXPECT_TRUE(n.any_zero);
  EXPECT_TRUE(n.zero_rows[2]);
  EXPECT_EQ(n.unit.row(2).norm(), 0.0);
  Rng rng(1);
  const auto u = random_unit(rng, 20, 7);
  for (Eigen::Index i = 0; i < u.rows(); ++i) EXPECT_NEAR(u.row(i).norm(), 1.0, 1e-9);
}

TEST(Normalize, BackwardMatchesFiniteDifferences) {
  Rng rng(8);
  MatrixXd x(3, 4), w(3, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = rng.normal();
    w.data()[i] = rng.normal();
  }
  const auto f = [&](const MatrixXd& v) { return normalize(v).unit.cwiseProduct(w).sum(); };
  const auto g = normalize_backward(x, normalize(x).unit, w);
  EXPECT_LT(rel_err(g, numeric_grad(x, f)), 1e-6);
}

TEST(Triplet, Examples) {
  EXPECT_NEAR(triplet_loss(rows({{1, 0}}), rows({{1, 0}}), rows({{0, 1}}), 1.0), 0.0, 1e-12);
  EXPECT_NEAR(triplet_loss(rows({{1, 0}}), rows({{0, 1}}), rows({{1, 0}}), 1.0), std::sqrt(2.0) + 1, 1e-12);
  EXPECT_NEAR(std::sqrt(2.0) + 1, 2.41421, 1e-5);
  Rng rng(2);
  const auto a = random_unit(rng, 4, 3);
  const auto p = random_unit(rng, 4, 3);
  EXPECT_NEAR(triplet_loss(a, p, p, 0.7), 0.7, 1e-12);
  EXPECT_THROW(triplet_loss(a, p, rows({{1, 0, 0}}), 1.0), ShapeError);
}

TEST(Triplet, PiecewiseIdentity) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto a = random_unit(rng, 1, 5), p = random_unit(rng, 1, 5), n = random_unit(rng, 1, 5);
    const double m = 0.5 * rng.uniform();
    const double dp = (a - p).norm(), dn = (a - n).norm();
    const double l = triplet_loss(a, p, n, m);
    if (dn >= dp + m) {
      EXPECT_EQ(l, 0.0);
    } else {
      EXPECT_NEAR(l, dp - dn + m, 1e-12);
    }
  }
}

TEST(Triplet, GradientAwayFromKink) {
  Rng rng(6);
  int checked = 0;
  while (checked < 20) {
    const auto a = random_unit(rng, 3, 4), p = random_unit(rng, 3, 4), n = random_unit(rng, 3, 4);
    bool near_kink = false;
    for (Eigen::Index i = 0; i < 3; ++i) {
      near_kink |= std::abs((a.row(i) - p.row(i)).norm() - (a.row(i) - n.row(i)).norm() + 1.0) < 1e-3;
    }
    if (near_kink) continue;
    TripletGrad g;
    triplet_loss(a, p, n, 1.0, &g);
    EXPECT_LT(rel_err(g.anchor, numeric_grad(a, [&](const MatrixXd& x) { return triplet_loss(x, p, n, 1.0); })), 1e-4);
    EXPECT_LT(rel_err(g.positive, numeric_grad(p, [&](const MatrixXd& x) { return triplet_loss(a, x, n, 1.0); })), 1e-4);
    EXPECT_LT(rel_err(g.negative, numeric_grad(n, [&](const MatrixXd& x) { return triplet_loss(a, p, x, 1.0); })), 1e-4);
    ++checked;
  }
}

TEST(Triplet, KinkTakesActiveBranch) {
  // d(a,p) = sqrt(2), d(a,n) = sqrt(2) and margin 0: expression exactly 0.
  TripletGrad g;
  const double l = triplet_loss(rows({{1, 0}}), rows({{0, 1}}), rows({{0, -1}}), 0.0, &g);
  EXPECT_EQ(l, 0.0);
  EXPECT_GT(g.positive.norm(), 0.0);
}

TEST(Tension, Examples) {
  const MatrixXd same = rows({{1, 2}, {1, 2}});
  const std::vector<std::size_t> self{0, 1};
  EXPECT_NEAR(tension_loss(same, self, 0.1), std::log(2.0), 1e-9);
  const MatrixXd four = rows({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}});
  const std::vector<std::size_t> ring{1, 2, 3, 0};
  EXPECT_NEAR(tension_loss(four, ring, 0.5), std::log(4.0), 1e-9);
  // z1 orthogonal to z2; positives are copies of the anchors (rows 2, 3).
  const MatrixXd orth = rows({{1, 0}, {0, 1}, {1, 0}, {0, 1}});
  const std::vector<std::size_t> copies{2, 3};
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(expect, 0.31326, 1e-5);
  EXPECT_NEAR(tension_loss(orth, copies, 1.0), expect, 1e-12);
  EXPECT_THROW(tension_loss(orth, copies, 0.0), ConfigError);
  EXPECT_THROW(tension_loss(orth, copies, -1.0), ConfigError);
  const std::vector<std::size_t> one{0};
  EXPECT_THROW(tension_loss(orth, one, 1.0), ShapeError);
}

TEST(Tension, NonNegativeAndScaleInvariant) {
  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    MatrixXd z(6, 4);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    std::vector<std::size_t> pos{3, 4, 5};
    const double l = tension_loss(z, pos, 0.2);
    EXPECT_GE(l, 0.0);
    EXPECT_NEAR(tension_loss(3.7 * z, pos, 0.2), l, 1e-9);
  }
}

TEST(Tension, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    const auto z = random_unit(rng, 8, 5);
    const std::vector<std::size_t> pos{4, 5, 6, 7};
    const double tau = 0.1 + rng.uniform();
    MatrixXd g;
    tension_loss(z, pos, tau, &g);
    EXPECT_LT(rel_err(g, numeric_grad(z, [&](const MatrixXd& x) { return tension_loss(x, pos, tau); })), 1e-4);
  }
}

TEST(Combined, IdentityAndExamples) {
  EXPECT_NEAR(combined_loss(0.5, 0.2, 1.0).total, 0.7, 1e-12);
  EXPECT_EQ(combined_loss(0.5, 0.2, 0.0).total, 0.5);
  EXPECT_NEAR(combined_loss(0.4, 0.1, 5.0).total, 0.9, 1e-12);
  EXPECT_THROW(combined_loss(0.4, 0.1, -1.0), ConfigError);
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const double b = 3 * rng.uniform(), c = 3 * rng.uniform(), l = 10 * rng.uniform();
    const auto lb = combined_loss(b, c, l);
    EXPECT_NEAR(lb.total, b + l * c, 1e-9);
    EXPECT_EQ(lb.lambda, l);
  }
}

TEST(SampleTriplets, Structure) {
  const std::vector<std::uint8_t> balanced{1, 1, 0, 0};
  const auto b = sample_triplets(balanced, 1);
  ASSERT_EQ(b.size(), 4u);
  for (std::size_t t = 0; t < b.size(); ++t) {
    EXPECT_NE(b.anchor[t], b.positive[t]);
    EXPECT_EQ(balanced[b.anchor[t]], balanced[b.positive[t]]);
    EXPECT_NE(balanced[b.anchor[t]], balanced[b.negative[t]]);
  }
  const std::vector<std::uint8_t> lone{1, 0, 0, 0};
  const auto l = sample_triplets(lone, 1);
  EXPECT_EQ(l.anchor, (std::vector<std::size_t>{1, 2, 3}));
  const std::vector<std::uint8_t> single{0, 0, 0};
  EXPECT_TRUE(sample_triplets(single, 1).skipped);
  const auto again = sample_triplets(balanced, 1);
  EXPECT_EQ(again.positive, b.positive);
  EXPECT_EQ(again.negative, b.negative);
}

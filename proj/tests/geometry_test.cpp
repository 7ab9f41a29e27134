/*
 * Copyright 2026 The kavguard Authors.
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

#include "kavguard/geometry.hpp"

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "gmock/gmock.h"
#include "gtest/gtest.h"
#include "test_util.hpp"

namespace kavguard {
namespace {

using testing::make_model;
using testing::make_stats;
using testing::rel_err;

// Full-covariance Mahalanobis sqrt((x - mu)^T Sigma^-1 (x - mu)) with Sigma a
// dense matrix that happens to be diagonal, solved by LU.
double dense_mahalanobis(const std::vector<double>& x, const std::vector<double>& mu,
                         const std::vector<double>& var) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    sigma(i, i) = var[i];
    d(i) = x[i] - mu[i];
  }
  const Eigen::VectorXd solved = sigma.fullPivLu().solve(d);
  return std::sqrt(d.dot(solved));
}

struct RandomPair {
  ClassStats a, b;
  std::vector<double> x;
};

RandomPair random_pair(std::mt19937_64& rng, std::size_t dim, double log10_lo = -1,
                       double log10_hi = 1) {
  std::normal_distribution<double> normal(0.0, 3.0);
  std::uniform_real_distribution<double> expo(log10_lo, log10_hi);
  RandomPair p;
  p.a = make_stats(0, std::vector<double>(dim), std::vector<double>(dim));
  p.b = make_stats(1, std::vector<double>(dim), std::vector<double>(dim));
  p.x.resize(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    p.a.mean[k] = normal(rng);
    p.b.mean[k] = normal(rng);
    p.a.variance[k] = std::pow(10.0, expo(rng));
    p.b.variance[k] = std::pow(10.0, expo(rng));
    p.x[k] = normal(rng);
  }
  return p;
}

TEST(Mahalanobis, AtMeanIsExactlyZero) {
  const auto s = make_stats(0, {1.5, -2.0, 7.25}, {0.3, 2.0, 1e-12});
  EXPECT_EQ(mahalanobis_diag(s.mean, s), 0.0);
}

TEST(Mahalanobis, HandArithmetic) {
  const auto s = make_stats(0, {0, 0}, {1, 4});
  EXPECT_DOUBLE_EQ(mahalanobis_diag(std::vector<double>{1, 2}, s), std::sqrt(2.0));
  EXPECT_NEAR(mahalanobis_diag(std::vector<float>{1, 2}, s), 1.4142136, 1e-7);
}

TEST(Mahalanobis, DenseOracleDim64) {
  std::mt19937_64 rng(64);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_pair(rng, 64);
    const double want = dense_mahalanobis(p.x, p.a.mean, p.a.variance);
    EXPECT_LE(rel_err(mahalanobis_diag(p.x, p.a), want), 1e-12);
  }
}

TEST(Mahalanobis, OneSigmaOffsetGivesSqrtDim) {
  std::mt19937_64 rng(65);
  for (std::size_t dim : {1u, 7u, 100u, 2048u}) {
    const auto p = random_pair(rng, dim, -3, 3);
    std::vector<double> x(dim);
    for (std::size_t k = 0; k < dim; ++k) x[k] = p.a.mean[k] + std::sqrt(p.a.variance[k]);
    EXPECT_LE(rel_err(mahalanobis_diag(x, p.a), std::sqrt(static_cast<double>(dim))), 1e-12);
  }
}

TEST(Mahalanobis, StandardizedNormEqualsDistance) {
  std::mt19937_64 rng(66);
  const auto p = random_pair(rng, 33);
  const auto z = standardize(p.x, p.a);
  double sq = 0.0;
  for (double v : z) sq += v * v;
  EXPECT_LE(rel_err(std::sqrt(sq), mahalanobis_diag(p.x, p.a)), 1e-13);
}

TEST(Mahalanobis, Errors) {
  const auto s = make_stats(0, {0, 0}, {1, 1});
  EXPECT_THROW(mahalanobis_diag(std::vector<double>{1}, s), UsageError);
  EXPECT_THROW(mahalanobis_diag(std::vector<double>{1, std::nan("")}, s), UsageError);
  EXPECT_THROW(
      mahalanobis_diag(std::vector<double>{1, std::numeric_limits<double>::infinity()}, s),
      UsageError);
}

TEST(Mahalanobis, ChiSquaredMeanLaw) {
  // Squared distances of Gaussian samples from their own distribution
  // average df within 3 standard errors sqrt(2 df / n).
  std::mt19937_64 rng(67);
  const std::size_t df = 50, n = 20000;
  const auto p = random_pair(rng, df);
  std::normal_distribution<double> z(0.0, 1.0);
  double total = 0.0;
  std::vector<double> x(df);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < df; ++k) x[k] = p.a.mean[k] + std::sqrt(p.a.variance[k]) * z(rng);
    total += squared_mahalanobis_diag(x, p.a);
  }
  EXPECT_NEAR(total / n, static_cast<double>(df), 3.0 * std::sqrt(2.0 * df / n));
}

TEST(JointStats, HandArithmeticAndSymmetry) {
  const auto a = make_stats(0, {1}, {1});
  const auto b = make_stats(1, {2}, {3});
  const auto j = joint_stats(a, b);
  EXPECT_EQ(j.mean_joint, std::vector<double>{3});
  EXPECT_EQ(j.variance_joint, std::vector<double>{4});
  EXPECT_EQ(joint_stats(b, a), j);
  EXPECT_EQ(joint_distance(std::vector<double>{3}, j), 0.0);
  EXPECT_EQ(joint_distance(std::vector<double>{5}, j), 1.0);
  EXPECT_THROW(joint_stats(a, make_stats(2, {1, 1}, {1, 1})), UsageError);
}

TEST(JointStats, ElementwiseOracleAndDenseDistance) {
  std::mt19937_64 rng(68);
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_pair(rng, 64);
    const auto j = joint_stats(p.a, p.b);
    std::vector<double> mu(64), var(64);
    for (std::size_t k = 0; k < 64; ++k) {
      mu[k] = p.a.mean[k] + p.b.mean[k];
      var[k] = p.a.variance[k] + p.b.variance[k];
      EXPECT_EQ(j.mean_joint[k], mu[k]);
      EXPECT_EQ(j.variance_joint[k], var[k]);
    }
    EXPECT_LE(rel_err(joint_distance(p.x, j), dense_mahalanobis(p.x, mu, var)), 1e-12);
  }
}

TEST(OutlierThreshold, Values) {
  EXPECT_EQ(outlier_threshold(2), 4.0);
  EXPECT_EQ(outlier_threshold(8), 12.0);
  EXPECT_NEAR(outlier_threshold(13614), 13779.009090658667, 1e-9);
  EXPECT_THROW(outlier_threshold(0), UsageError);
}

TEST(Bhattacharyya, IdenticalIsZero) {
  std::mt19937_64 rng(70);
  const auto p = random_pair(rng, 100, -6, 6);
  EXPECT_EQ(bhattacharyya_diag(p.a, p.a), 0.0);
}

TEST(Bhattacharyya, ClosedForms1D) {
  const auto a = make_stats(0, {0}, {1});
  const auto b = make_stats(1, {2}, {1});
  EXPECT_NEAR(bhattacharyya_diag(a, b), 0.5, 1e-12);
  const auto c = make_stats(0, {0}, {1});
  const auto d = make_stats(1, {0}, {9});
  const double want = 0.25 * (2.0 * std::log(5.0) - std::log(1.0) - std::log(9.0));
  EXPECT_NEAR(bhattacharyya_diag(c, d), want, 1e-12);
  EXPECT_NEAR(want, 0.2554, 1e-4);
}

TEST(Bhattacharyya, SymmetricAndNonNegativeProperty) {
  std::mt19937_64 rng(71);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_pair(rng, 1 + trial % 50, -6, 6);
    const double ab = bhattacharyya_diag(p.a, p.b);
    EXPECT_EQ(ab, bhattacharyya_diag(p.b, p.a));
    EXPECT_GE(ab, -1e-12);
  }
}

TEST(Bhattacharyya, MatchesDeterminantFormAtModerateDim) {
  std::mt19937_64 rng(72);
  std::uniform_real_distribution<double> v(0.5, 2.0);
  for (std::size_t dim : {1u, 5u, 20u, 50u}) {
    auto p = random_pair(rng, dim);
    for (std::size_t k = 0; k < dim; ++k) {
      p.a.variance[k] = v(rng);
      p.b.variance[k] = v(rng);
    }
    double det = 1.0, det1 = 1.0, det2 = 1.0, quad = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double pooled = (p.a.variance[k] + p.b.variance[k]) / 2.0;
      det *= pooled;
      det1 *= p.a.variance[k];
      det2 *= p.b.variance[k];
      const double dm = p.a.mean[k] - p.b.mean[k];
      quad += dm * dm / pooled;
    }
    const double logterm = 0.5 * std::log(det / std::sqrt(det1 * det2));
    const double got = bhattacharyya_diag(p.a, p.b) - quad / 8.0;
    EXPECT_LE(rel_err(got, logterm), 1e-10) << dim;
  }
}

TEST(Bhattacharyya, StableAtHighDimWithWideVariances) {
  namespace mp = boost::multiprecision;
  using big = mp::cpp_bin_float_50;
  std::mt19937_64 rng(73);
  for (std::size_t dim : {2000u, 13614u}) {
    const auto p = random_pair(rng, dim, -6, 6);
    big quad = 0, logs = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      const big va = p.a.variance[k], vb = p.b.variance[k];
      const big pooled = (va + vb) / 2;
      const big dm = big(p.a.mean[k]) - big(p.b.mean[k]);
      quad += dm * dm / pooled;
      logs += 2 * mp::log(pooled) - mp::log(va) - mp::log(vb);
    }
    const double want = static_cast<double>(quad / 8 + logs / 4);
    const double got = bhattacharyya_diag(p.a, p.b);
    EXPECT_TRUE(std::isfinite(got));
    EXPECT_LE(rel_err(got, want), 1e-6) << dim;
  }
}

TEST(OverlapMatrix, IdenticalClassesGiveZeros) {
  const auto m = overlap_matrix(make_model({make_stats(0, {1, 2}, {1, 1}),
                                            make_stats(1, {1, 2}, {1, 1})}));
  EXPECT_EQ(m.values, (std::vector<double>{0, 0, 0, 0}));
}

TEST(OverlapMatrix, ThreeClassClosedForm) {
  const auto m = overlap_matrix(make_model(
      {make_stats(0, {0}, {1}), make_stats(1, {2}, {1}), make_stats(2, {4}, {1})}));
  // Unit variances: (delta mu)^2 / 8.
  EXPECT_NEAR(m.at(0, 1), 4.0 / 8.0, 1e-15);
  EXPECT_NEAR(m.at(0, 2), 16.0 / 8.0, 1e-15);
  EXPECT_NEAR(m.at(1, 2), 4.0 / 8.0, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(m.at(i, i), 0.0);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.at(i, j), m.at(j, i));
  }
  std::ostringstream os;
  write_overlap_csv(m, os);
  EXPECT_EQ(os.str(), "class,0,1,2\n0,0,0.5,2\n1,0.5,0,0.5\n2,2,0.5,0\n");
}

TEST(OverlapMatrix, EvaluatesEachPairOnce) {
  for (int k : {2, 3, 7, 12}) {
    std::vector<ClassStats> classes;
    for (int c = 0; c < k; ++c) classes.push_back(make_stats(c, {double(c)}, {1}));
    int calls = 0;
    overlap_matrix(make_model(classes), [&](const ClassStats& a, const ClassStats& b) {
      ++calls;
      return bhattacharyya_diag(a, b);
    });
    EXPECT_EQ(calls, k * (k - 1) / 2);
  }
}

TEST(OverlapMatrix, NeedsTwoClasses) {
  EXPECT_THROW(overlap_matrix(make_model({make_stats(0, {0}, {1})})), UsageError);
}

TEST(OverlapMatrix, SixSignificantDigits) {
  const auto m = overlap_matrix(make_model({make_stats(3, {0}, {1}), make_stats(9, {1}, {3})}));
  std::ostringstream os;
  write_overlap_csv(m, os);
  const double d = bhattacharyya_diag(make_stats(3, {0}, {1}), make_stats(9, {1}, {3}));
  char cell[32];
  std::snprintf(cell, sizeof cell, "%.6g", d);
  EXPECT_EQ(os.str(), std::string("class,3,9\n3,0,") + cell + "\n9," + cell + ",0\n");
}

}  // namespace
}  // namespace kavguard

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

// Distances between activation vectors and fitted diagonal Gaussians.
// Everything is evaluated in double regardless of the input element type.

#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <ostream>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "kavguard/error.hpp"
#include "kavguard/kav_store.hpp"
#include "kavguard/stats.hpp"

namespace kavguard {

/// Any contiguous range of float or double.
template <typename R>
concept RealVector = std::ranges::contiguous_range<R> && std::ranges::sized_range<R> &&
                     std::floating_point<std::ranges::range_value_t<R>>;

namespace detail {

inline void check_dims(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw UsageError(std::string(what) + ": dimension " + std::to_string(got) + " != " +
                     std::to_string(want));
  }
}

// sum_k (x_k - mean_k)^2 / variance_k
template <RealVector R>
double scaled_sq_norm(const R& x, std::span<const double> mean, std::span<const double> variance,
                      const char* what) {
  check_dims(std::ranges::size(x), mean.size(), what);
  check_dims(variance.size(), mean.size(), what);
  const auto* p = std::ranges::data(x);
  double acc = 0.0;
  for (std::size_t k = 0; k < mean.size(); ++k) {
    const double v = static_cast<double>(p[k]);
    if (!std::isfinite(v)) {
      throw UsageError(std::string(what) + ": non-finite input at element " + std::to_string(k));
    }
    const double d = v - mean[k];
    acc += d * d / variance[k];
  }
  return acc;
}

}  // namespace detail

/// Squared diagonal Mahalanobis distance to one class.
template <RealVector R>
double squared_mahalanobis_diag(const R& kav, const ClassStats& stats) {
  return detail::scaled_sq_norm(kav, stats.mean, stats.variance, "mahalanobis_diag");
}

/// Diagonal Mahalanobis distance: the Euclidean norm of standardize(kav, stats).
template <RealVector R>
double mahalanobis_diag(const R& kav, const ClassStats& stats) {
  return std::sqrt(squared_mahalanobis_diag(kav, stats));
}

/// (kav - mean) / stddev, elementwise.
template <RealVector R>
std::vector<double> standardize(const R& kav, const ClassStats& stats) {
  detail::check_dims(std::ranges::size(kav), stats.dim(), "standardize");
  const auto* p = std::ranges::data(kav);
  std::vector<double> out(stats.dim());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double v = static_cast<double>(p[k]);
    if (!std::isfinite(v)) throw UsageError("standardize: non-finite input");
    out[k] = (v - stats.mean[k]) / std::sqrt(stats.variance[k]);
  }
  return out;
}

/// Gaussian of the sum of two independent class activations.
struct JointStats {
  std::vector<double> mean_joint;
  std::vector<double> variance_joint;

  std::size_t dim() const { return mean_joint.size(); }
  bool operator==(const JointStats&) const = default;
};

inline JointStats joint_stats(const ClassStats& a, const ClassStats& b) {
  detail::check_dims(b.dim(), a.dim(), "joint_stats");
  JointStats j;
  j.mean_joint.resize(a.dim());
  j.variance_joint.resize(a.dim());
  for (std::size_t k = 0; k < a.dim(); ++k) {
    j.mean_joint[k] = a.mean[k] + b.mean[k];
    j.variance_joint[k] = a.variance[k] + b.variance[k];
  }
  return j;
}

template <RealVector R>
double squared_joint_distance(const R& kav, const JointStats& joint) {
  return detail::scaled_sq_norm(kav, joint.mean_joint, joint.variance_joint, "joint_distance");
}

template <RealVector R>
double joint_distance(const R& kav, const JointStats& joint) {
  return std::sqrt(squared_joint_distance(kav, joint));
}

/// Cut on squared distance: df + sqrt(2 df), the mean plus one standard
/// deviation of the normal approximation N(df, 2 df) to chi-squared(df).
inline double outlier_threshold(std::size_t df) {
  if (df == 0) throw UsageError("outlier_threshold: df must be >= 1");
  const double d = static_cast<double>(df);
  return d + std::sqrt(2.0 * d);
}

/// Bhattacharyya distance between two diagonal Gaussians, with the pooled
/// covariance taken as the elementwise average of the two variances.
///
/// The log-determinant ratio is summed per dimension as
///   1/4 * sum_i [2 ln((a_i + b_i) / 2) - (ln a_i + ln b_i)]
/// so no determinant is ever formed; each term is symmetric in (a, b) so the
/// result is bit-identical under argument swap.
inline double bhattacharyya_diag(const ClassStats& a, const ClassStats& b) {
  detail::check_dims(b.dim(), a.dim(), "bhattacharyya_diag");
  double mahal = 0.0;
  double logdet = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double va = a.variance[i];
    const double vb = b.variance[i];
    const double pooled = (va + vb) / 2.0;
    const double dm = a.mean[i] - b.mean[i];
    mahal += dm * dm / pooled;
    logdet += 2.0 * std::log(pooled) - (std::log(va) + std::log(vb));
  }
  return mahal / 8.0 + logdet / 4.0;
}

struct OverlapMatrix {
  std::vector<ClassId> class_ids;
  std::vector<double> values;  // row-major, size n*n

  std::size_t size() const { return class_ids.size(); }
  double at(std::size_t i, std::size_t j) const { return values[i * class_ids.size() + j]; }
};

using PairDistance = std::function<double(const ClassStats&, const ClassStats&)>;

/// Pairwise distances between all fitted classes, ordered by class id.
/// Each unordered pair is evaluated once and mirrored.
inline OverlapMatrix overlap_matrix(const FittedModel& model,
                                    const PairDistance& distance = bhattacharyya_diag) {
  if (model.classes.size() < 2) {
    throw UsageError("overlap_matrix needs at least 2 classes, model has " +
                     std::to_string(model.classes.size()));
  }
  OverlapMatrix m;
  std::vector<const ClassStats*> stats;
  for (const auto& [id, s] : model.classes) {
    m.class_ids.push_back(id);
    stats.push_back(&s);
  }
  const std::size_t n = stats.size();
  m.values.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = distance(*stats[i], *stats[j]);
      m.values[i * n + j] = d;
      m.values[j * n + i] = d;
    }
  }
  return m;
}

/// CSV with class ids along the first row and column, 6 significant digits.
inline void write_overlap_csv(const OverlapMatrix& m, std::ostream& out) {
  std::string buf = "class";
  for (ClassId id : m.class_ids) buf += "," + std::to_string(id);
  buf += '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    buf += std::to_string(m.class_ids[i]);
    for (std::size_t j = 0; j < m.size(); ++j) {
      buf += ',';
      buf += format_real(m.at(i, j), 6);
    }
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("failed writing overlap matrix");
}

}  // namespace kavguard

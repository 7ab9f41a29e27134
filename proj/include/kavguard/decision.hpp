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

// Hierarchical certain / uncertain / outlier labelling.
//
// For a test vector x and its two candidate classes (top1, top2):
//
//   1. Outlier test against the joint Gaussian N(mu1 + mu2, var1 + var2):
//      d_joint^2 is compared with t = df + sqrt(2 df). With the literal rule
//      (AsWrittenBelow) x is an outlier iff d_joint^2 <= t; with ProseAbove
//      it is an outlier iff d_joint^2 > t.
//   2. Otherwise x is uncertain iff |d1 - d2| / max(d1, d2) <= k, with 0/0
//      counted as uncertain.
//   3. Otherwise x is certain, predicted as top1.
//
// The scalar confidence is -d1.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kavguard/error.hpp"
#include "kavguard/geometry.hpp"
#include "kavguard/kav_store.hpp"
#include "kavguard/parallel.hpp"
#include "kavguard/stats.hpp"

namespace kavguard {

enum class Category { Certain, Uncertain, Outlier };
enum class Orientation { AsWrittenBelow, ProseAbove };
enum class Top2Source { Logits, MinDistance };

inline constexpr double kDefaultKPercent = 0.10;

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::Certain:
      return "certain";
    case Category::Uncertain:
      return "uncertain";
    case Category::Outlier:
      return "outlier";
  }
  return "?";
}

inline std::optional<Category> parse_category(std::string_view s) {
  if (s == "certain") return Category::Certain;
  if (s == "uncertain") return Category::Uncertain;
  if (s == "outlier") return Category::Outlier;
  return std::nullopt;
}

struct DecisionConfig {
  double k_percent = kDefaultKPercent;
  Orientation orientation = Orientation::AsWrittenBelow;
  // nullopt: logits when the record carries them, distances otherwise.
  std::optional<Top2Source> top2_source;
  // nullopt: the model dimension.
  std::optional<std::size_t> df;

  void validate() const {
    if (!std::isfinite(k_percent) || k_percent < 0.0 || k_percent > 1.0) {
      throw UsageError("k_percent must lie in [0, 1]");
    }
    if (df && *df == 0) throw UsageError("df must be >= 1");
  }
};

struct Verdict {
  std::uint64_t record_index = 0;
  Category category = Category::Certain;
  ClassId top1 = 0;
  ClassId top2 = 0;
  double d1 = 0.0;
  double d2 = 0.0;
  double d_joint_sq = 0.0;
  double threshold = 0.0;
  double confidence = 0.0;

  bool operator==(const Verdict&) const = default;
};

/// |d1 - d2| / max(d1, d2); symmetric, in [0, 1]. Returns 0 for two zeros.
inline double closeness_ratio(double d1, double d2) {
  const double hi = std::max(d1, d2);
  if (hi == 0.0) return 0.0;
  return std::abs(d1 - d2) / hi;
}

inline bool is_uncertain(double d1, double d2, double k_percent) {
  return closeness_ratio(d1, d2) <= k_percent;
}

inline bool is_outlier(double d_joint_sq, double threshold, Orientation orientation) {
  return orientation == Orientation::AsWrittenBelow ? d_joint_sq <= threshold
                                                    : d_joint_sq > threshold;
}

/// Steps 1-3 on precomputed distances.
inline Category classify(double d1, double d2, double d_joint_sq, double threshold,
                         const DecisionConfig& config) {
  if (is_outlier(d_joint_sq, threshold, config.orientation)) return Category::Outlier;
  if (is_uncertain(d1, d2, config.k_percent)) return Category::Uncertain;
  return Category::Certain;
}

namespace detail {

struct Top2 {
  ClassId first = 0;
  ClassId second = 0;
  std::optional<std::pair<double, double>> distances;
};

inline void check_decidable(const KavRecord& record, const FittedModel& model) {
  if (model.classes.size() < 2) {
    throw UsageError("decision needs at least 2 fitted classes, model has " +
                     std::to_string(model.classes.size()));
  }
  if (record.kav.size() != model.dim) {
    throw UsageError("record " + std::to_string(record.record_index) + " has dim " +
                     std::to_string(record.kav.size()) + ", model has " +
                     std::to_string(model.dim));
  }
}

inline Top2Source resolve_source(const KavRecord& record, const DecisionConfig& config) {
  if (config.top2_source) return *config.top2_source;
  return record.logits ? Top2Source::Logits : Top2Source::MinDistance;
}

// Classes are visited in ascending id and only a strictly better score
// displaces a slot, so ties resolve to the lower id.
template <typename Better>
std::pair<ClassId, ClassId> best_two(const FittedModel& model, Better&& better,
                                     const std::function<double(ClassId)>& score) {
  ClassId a = 0, b = 0;
  double sa = 0.0, sb = 0.0;
  int seen = 0;
  for (const auto& [id, stats] : model.classes) {
    const double s = score(id);
    if (seen == 0 || better(s, sa)) {
      if (seen > 0) {
        b = a;
        sb = sa;
      }
      a = id;
      sa = s;
    } else if (seen == 1 || better(s, sb)) {
      b = id;
      sb = s;
    }
    ++seen;
  }
  return {a, b};
}

inline Top2 top2_with_distances(const KavRecord& record, const FittedModel& model,
                                const DecisionConfig& config) {
  check_decidable(record, model);
  if (resolve_source(record, config) == Top2Source::Logits) {
    if (!record.logits) {
      throw UsageError("record " + std::to_string(record.record_index) +
                       " has no logits but top-2 source is logits");
    }
    const auto& logits = *record.logits;
    for (const auto& [id, s] : model.classes) {
      if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) {
        throw UsageError("model class " + std::to_string(id) + " has no logit in record " +
                         std::to_string(record.record_index));
      }
      if (!std::isfinite(logits[id])) {
        throw UsageError("non-finite logit in record " + std::to_string(record.record_index));
      }
    }
    auto [a, b] = best_two(
        model, [](double x, double y) { return x > y; },
        [&](ClassId id) { return static_cast<double>(logits[id]); });
    return {a, b, std::nullopt};
  }
  std::map<ClassId, double> dist;
  for (const auto& [id, s] : model.classes) dist[id] = mahalanobis_diag(record.kav, s);
  auto [a, b] = best_two(
      model, [](double x, double y) { return x < y; }, [&](ClassId id) { return dist.at(id); });
  return {a, b, std::make_pair(dist.at(a), dist.at(b))};
}

}  // namespace detail

/// The two candidate classes for `record`, best first.
inline std::pair<ClassId, ClassId> select_top2(const KavRecord& record, const FittedModel& model,
                                               const DecisionConfig& config = {}) {
  const auto t = detail::top2_with_distances(record, model, config);
  return {t.first, t.second};
}

inline Verdict decide(const KavRecord& record, const FittedModel& model,
                      const DecisionConfig& config = {}) {
  config.validate();
  const auto top = detail::top2_with_distances(record, model, config);
  const auto& s1 = model.at(top.first);
  const auto& s2 = model.at(top.second);

  Verdict v;
  v.record_index = record.record_index;
  v.top1 = top.first;
  v.top2 = top.second;
  if (top.distances) {
    v.d1 = top.distances->first;
    v.d2 = top.distances->second;
  } else {
    v.d1 = mahalanobis_diag(record.kav, s1);
    v.d2 = mahalanobis_diag(record.kav, s2);
  }
  v.d_joint_sq = squared_joint_distance(record.kav, joint_stats(s1, s2));
  v.threshold = outlier_threshold(config.df.value_or(model.dim));
  v.confidence = -v.d1;

  v.category = classify(v.d1, v.d2, v.d_joint_sq, v.threshold, config);
  return v;
}

/// decide() over every record, in order. Splitting across workers does not
/// change any verdict. The first failing record aborts the batch.
inline std::vector<Verdict> decide_batch(std::span<const KavRecord> records,
                                         const FittedModel& model,
                                         const DecisionConfig& config = {},
                                         std::size_t threads = 1) {
  config.validate();
  std::vector<Verdict> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    try {
      out[i] = decide(records[i], model, config);
    } catch (const UsageError& e) {
      throw UsageError("record " + std::to_string(records[i].record_index) + ": " + e.what());
    }
  });
  return out;
}

inline std::vector<Verdict> decide_batch(const KavDataset& dataset, const FittedModel& model,
                                         const DecisionConfig& config = {},
                                         std::size_t threads = 1) {
  return decide_batch(dataset.records(), model, config, threads);
}

struct CategoryCounts {
  std::uint64_t certain = 0;
  std::uint64_t uncertain = 0;
  std::uint64_t outlier = 0;

  std::uint64_t total() const { return certain + uncertain + outlier; }
};

inline CategoryCounts count_categories(std::span<const Verdict> verdicts) {
  CategoryCounts c;
  for (const auto& v : verdicts) {
    switch (v.category) {
      case Category::Certain:
        ++c.certain;
        break;
      case Category::Uncertain:
        ++c.uncertain;
        break;
      case Category::Outlier:
        ++c.outlier;
        break;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Verdict CSV

inline constexpr std::string_view kVerdictCsvHeader =
    "record_index,category,top1,top2,d1,d2,d_joint_sq,threshold,confidence";

inline void append_verdict_row(std::string& buf, const Verdict& v) {
  buf += std::to_string(v.record_index);
  buf += ',';
  buf += to_string(v.category);
  buf += ',' + std::to_string(v.top1) + ',' + std::to_string(v.top2);
  for (double x : {v.d1, v.d2, v.d_joint_sq, v.threshold, v.confidence}) {
    buf += ',';
    buf += format_real(x);
  }
  buf += '\n';
}

inline void write_verdicts_csv(std::span<const Verdict> verdicts, std::ostream& out) {
  std::string buf(kVerdictCsvHeader);
  buf += '\n';
  for (const auto& v : verdicts) append_verdict_row(buf, v);
  out << buf;
  if (!out) throw IoError("failed writing verdicts");
}

inline std::vector<Verdict> read_verdicts_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing verdict CSV header at line 1");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kVerdictCsvHeader) throw FormatError("unexpected verdict CSV header at line 1");
  std::vector<Verdict> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto at = " at line " + std::to_string(line_no);
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw FormatError("expected 9 fields" + at);
    Verdict v;
    const auto idx = parse_int<std::uint64_t>(f[0]);
    const auto cat = parse_category(f[1]);
    const auto t1 = parse_int<ClassId>(f[2]);
    const auto t2 = parse_int<ClassId>(f[3]);
    if (!idx || !cat || !t1 || !t2) throw FormatError("malformed verdict row" + at);
    v.record_index = *idx;
    v.category = *cat;
    v.top1 = *t1;
    v.top2 = *t2;
    std::array<double*, 5> reals = {&v.d1, &v.d2, &v.d_joint_sq, &v.threshold, &v.confidence};
    for (std::size_t i = 0; i < reals.size(); ++i) {
      const auto x = parse_real(f[4 + i]);
      if (!x) throw FormatError("bad real in column " + std::to_string(5 + i) + at);
      *reals[i] = *x;
    }
    out.push_back(v);
  }
  if (in.bad()) throw IoError("read failure in verdict CSV");
  return out;
}

}  // namespace kavguard

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

// Detection-quality metrics over scores and verdicts.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kavguard/decision.hpp"
#include "kavguard/error.hpp"
#include "kavguard/kav_store.hpp"

namespace kavguard {

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr)
  double auroc = 0.0;
};

namespace detail {

inline void check_scores(std::span<const double> scores, const char* side) {
  if (scores.empty()) throw UsageError(std::string("auroc: no ") + side + " scores");
  for (double s : scores) {
    if (!std::isfinite(s)) throw UsageError(std::string("auroc: non-finite ") + side + " score");
  }
}

}  // namespace detail

/// Area under a piecewise-linear curve.
inline double trapezoid_area(std::span<const std::pair<double, double>> points) {
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    area += (points[i].first - points[i - 1].first) *
            (points[i].second + points[i - 1].second) / 2.0;
  }
  return area;
}

/// Positives are expected to score higher. The area is the Mann-Whitney
/// statistic with mid-ranks for ties, i.e. P(pos > neg) + P(pos == neg) / 2.
/// The curve has one vertex per distinct score, swept from high to low.
inline RocCurve auroc(std::span<const double> positives, std::span<const double> negatives) {
  detail::check_scores(positives, "positive");
  detail::check_scores(negatives, "negative");

  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> all;
  all.reserve(positives.size() + negatives.size());
  for (double s : positives) all.push_back({s, true});
  for (double s : negatives) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // Ranks are 1-based; a run of ties [i, j) shares rank (i + 1 + j) / 2.
  // Doubling the ranks keeps the sum integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t run_pos = 0;
    while (j < all.size() && all[j].score == all[i].score) run_pos += all[j++].positive ? 1 : 0;
    twice_rank_sum += run_pos * (i + 1 + j);
    i = j;
  }
  const auto np = static_cast<std::uint64_t>(positives.size());
  const auto nn = static_cast<std::uint64_t>(negatives.size());
  // 2U = 2R - np(np + 1)
  const std::uint64_t twice_u = twice_rank_sum - np * (np + 1);

  RocCurve curve;
  curve.auroc = static_cast<double>(twice_u) / (2.0 * static_cast<double>(np) *
                                                static_cast<double>(nn));
  curve.points.emplace_back(0.0, 0.0);
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t i = all.size(); i > 0;) {
    const double s = all[i - 1].score;
    while (i > 0 && all[i - 1].score == s) {
      (all[i - 1].positive ? tp : fp) += 1;
      --i;
    }
    curve.points.emplace_back(static_cast<double>(fp) / static_cast<double>(nn),
                              static_cast<double>(tp) / static_cast<double>(np));
  }
  return curve;
}

inline double outlier_rate(std::span<const Verdict> verdicts) {
  if (verdicts.empty()) throw UsageError("outlier_rate: no verdicts");
  const auto outliers = count_categories(verdicts).outlier;
  return static_cast<double>(outliers) / static_cast<double>(verdicts.size());
}

struct AccuracyReport {
  double overall = 0.0;
  // NaN when no verdict is Certain.
  double certain_only = std::numeric_limits<double>::quiet_NaN();
  double abstain_rate = 0.0;
  std::uint64_t total = 0;
  std::uint64_t correct = 0;
  std::uint64_t certain = 0;
  std::uint64_t certain_correct = 0;
};

/// Top-1 accuracy overall and restricted to Certain verdicts, plus the
/// fraction of Uncertain or Outlier verdicts.
inline AccuracyReport accuracy(std::span<const Verdict> verdicts, std::span<const ClassId> truth) {
  if (verdicts.size() != truth.size()) {
    throw UsageError("accuracy: " + std::to_string(verdicts.size()) + " verdicts but " +
                     std::to_string(truth.size()) + " labels");
  }
  if (verdicts.empty()) throw UsageError("accuracy: no verdicts");
  AccuracyReport r;
  r.total = verdicts.size();
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    if (truth[i] == kUnlabeled) {
      throw UsageError("accuracy: record " + std::to_string(verdicts[i].record_index) +
                       " is unlabeled");
    }
    const bool hit = verdicts[i].top1 == truth[i];
    r.correct += hit;
    if (verdicts[i].category == Category::Certain) {
      ++r.certain;
      r.certain_correct += hit;
    }
  }
  const auto n = static_cast<double>(r.total);
  r.overall = static_cast<double>(r.correct) / n;
  r.abstain_rate = static_cast<double>(r.total - r.certain) / n;
  if (r.certain > 0) {
    r.certain_only = static_cast<double>(r.certain_correct) / static_cast<double>(r.certain);
  }
  return r;
}

/// Largest softmax probability of a logit vector.
inline double softmax_confidence(std::span<const float> logits) {
  if (logits.empty()) throw UsageError("softmax_confidence: empty logits");
  double top = -std::numeric_limits<double>::infinity();
  for (float l : logits) top = std::max(top, static_cast<double>(l));
  if (!std::isfinite(top)) throw UsageError("softmax_confidence: non-finite logits");
  double z = 0.0;
  for (float l : logits) z += std::exp(static_cast<double>(l) - top);
  return 1.0 / z;
}

// ---------------------------------------------------------------------------
// Noise sweeps

struct SweepLevel {
  double noise_level = 0.0;
  double mean_confidence = 0.0;
  std::optional<double> auc;
};

struct SweepReport {
  std::vector<SweepLevel> levels;  // strictly increasing noise_level
};

struct SweepInput {
  std::vector<double> confidences;  // scored as positives
  std::vector<double> negatives;    // may be empty: no AUROC for this level
};

inline SweepReport sweep_report(const std::map<double, SweepInput>& per_level) {
  if (per_level.size() < 2) {
    throw UsageError("sweep_report needs at least 2 noise levels, got " +
                     std::to_string(per_level.size()));
  }
  SweepReport report;
  for (const auto& [level, input] : per_level) {
    if (!std::isfinite(level)) throw UsageError("sweep_report: non-finite noise level");
    if (input.confidences.empty()) throw UsageError("sweep_report: empty level");
    SweepLevel row;
    row.noise_level = level;
    row.mean_confidence = std::accumulate(input.confidences.begin(), input.confidences.end(), 0.0) /
                          static_cast<double>(input.confidences.size());
    if (!input.negatives.empty()) row.auc = auroc(input.confidences, input.negatives).auroc;
    report.levels.push_back(row);
  }
  return report;
}

/// Each level's verdict confidences are the positives; `negatives` is the
/// shared negative score set (e.g. scores of an outlier corpus).
inline SweepReport sweep_report(const std::map<double, std::vector<Verdict>>& per_level,
                                std::span<const double> negatives = {}) {
  std::map<double, SweepInput> inputs;
  for (const auto& [level, verdicts] : per_level) {
    SweepInput in;
    in.confidences.reserve(verdicts.size());
    for (const auto& v : verdicts) in.confidences.push_back(v.confidence);
    in.negatives.assign(negatives.begin(), negatives.end());
    inputs.emplace(level, std::move(in));
  }
  return sweep_report(inputs);
}

// ---------------------------------------------------------------------------
// Files

struct ScoreRow {
  std::uint64_t id = 0;
  double score = 0.0;
  int label = 1;  // 1 = positive set, 0 = negative set

  bool operator==(const ScoreRow&) const = default;
};

inline void write_scores_csv(std::span<const ScoreRow> rows, std::ostream& out) {
  std::string buf = "id,score,label\n";
  for (const auto& r : rows) {
    if (!std::isfinite(r.score)) throw UsageError("score of id " + std::to_string(r.id) + " is not finite");
    buf += std::to_string(r.id) + ',' + format_real(r.score) + ',' + std::to_string(r.label) + '\n';
  }
  out << buf;
  if (!out) throw IoError("failed writing scores");
}

inline std::vector<ScoreRow> read_scores_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing score CSV header at line 1");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "id,score,label") throw FormatError("score CSV header must be 'id,score,label'");
  std::vector<ScoreRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto at = " at line " + std::to_string(line_no);
    const auto f = split_csv_line(line);
    if (f.size() != 3) throw FormatError("expected 3 fields" + at);
    const auto id = parse_int<std::uint64_t>(f[0]);
    const auto score = parse_real(f[1]);
    const auto label = parse_int<int>(f[2]);
    if (!id || !score || !label) throw FormatError("malformed score row" + at);
    if (!std::isfinite(*score)) throw FormatError("non-finite score" + at);
    if (*label != 0 && *label != 1) throw FormatError("label must be 0 or 1" + at);
    rows.push_back({*id, *score, *label});
  }
  if (in.bad()) throw IoError("read failure in score CSV");
  return rows;
}

inline std::vector<double> score_values(std::span<const ScoreRow> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.score);
  return out;
}

/// {"auroc": a, "curve": [[fpr, tpr], ...]}
inline void write_roc_json(const RocCurve& roc, std::ostream& out) {
  std::string buf = "{\"auroc\":" + format_real(roc.auroc) + ",\"curve\":[";
  for (std::size_t i = 0; i < roc.points.size(); ++i) {
    if (i != 0) buf += ',';
    buf += '[' + format_real(roc.points[i].first) + ',' + format_real(roc.points[i].second) + ']';
  }
  buf += "]}\n";
  out << buf;
  if (!out) throw IoError("failed writing ROC report");
}

inline void write_roc_csv(const RocCurve& roc, std::ostream& out) {
  std::string buf = "fpr,tpr\n";
  for (const auto& [fpr, tpr] : roc.points) buf += format_real(fpr) + ',' + format_real(tpr) + '\n';
  out << buf;
  if (!out) throw IoError("failed writing ROC curve");
}

/// `noise_level,mean_confidence,auc`; auc is left blank for levels without
/// negatives.
inline void write_sweep_csv(const SweepReport& report, std::ostream& out) {
  std::string buf = "noise_level,mean_confidence,auc\n";
  for (const auto& l : report.levels) {
    buf += format_real(l.noise_level) + ',' + format_real(l.mean_confidence) + ',';
    if (l.auc) buf += format_real(*l.auc);
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("failed writing sweep report");
}

}  // namespace kavguard

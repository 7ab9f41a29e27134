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

// Per-class diagonal Gaussian fitting.
//
// Each class keeps the raw first and second moment sums (count, sum kav,
// sum kav^2) in 64-bit and is finalized to population mean and variance:
//
//   mean     = sum / N
//   variance = max(sum_sq / N - mean^2, floor)
//
// The two-moment form cancels badly when |mean| >> stddev; the floor absorbs
// the small negative values this can produce as well as constant dimensions.
//
// Fitting is one scan over the records. Records are grouped into fixed-size
// blocks, each block is accumulated on its own and blocks are merged in file
// order, so the result is bit-identical for any worker count.

#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kavguard/error.hpp"
#include "kavguard/kav_store.hpp"
#include "kavguard/parallel.hpp"

namespace kavguard {

inline constexpr double kDefaultVarianceFloor = 1e-12;
inline constexpr std::size_t kFitBlockRecords = 4096;

class MomentAccumulator {
 public:
  MomentAccumulator(ClassId class_id, std::size_t dim)
      : class_id_(class_id),
        sum_(dim, 0.0),
        sum_sq_(dim, 0.0),
        sum_residual_(dim, 0.0),
        sum_sq_residual_(dim, 0.0) {}

  /// Rebuilds an accumulator from serialized parts. Empty residuals mean
  /// zero.
  MomentAccumulator(ClassId class_id, std::uint64_t count, std::vector<double> sum,
                    std::vector<double> sum_sq, std::vector<double> sum_residual = {},
                    std::vector<double> sum_sq_residual = {})
      : class_id_(class_id),
        count_(count),
        sum_(std::move(sum)),
        sum_sq_(std::move(sum_sq)),
        sum_residual_(std::move(sum_residual)),
        sum_sq_residual_(std::move(sum_sq_residual)) {
    if (sum_.size() != sum_sq_.size()) throw UsageError("sum and sum_sq lengths differ");
    if (sum_residual_.empty()) sum_residual_.assign(sum_.size(), 0.0);
    if (sum_sq_residual_.empty()) sum_sq_residual_.assign(sum_.size(), 0.0);
    if (sum_residual_.size() != sum_.size() || sum_sq_residual_.size() != sum_.size()) {
      throw UsageError("residual lengths differ from dim");
    }
  }

  ClassId class_id() const { return class_id_; }
  std::uint64_t count() const { return count_; }
  std::size_t dim() const { return sum_.size(); }
  std::span<const double> sum() const { return sum_; }
  std::span<const double> sum_sq() const { return sum_sq_; }
  // Rounding error carried alongside each running sum; the exact total is
  // sum()[i] + sum_residual()[i] to about twice double precision.
  std::span<const double> sum_residual() const { return sum_residual_; }
  std::span<const double> sum_sq_residual() const { return sum_sq_residual_; }

  void add(std::span<const float> kav) {
    if (kav.size() != sum_.size()) {
      throw FormatError("kav length " + std::to_string(kav.size()) + " != accumulator dim " +
                        std::to_string(sum_.size()));
    }
    for (std::size_t i = 0; i < kav.size(); ++i) {
      const double v = kav[i];
      add_to(sum_[i], sum_residual_[i], v);
      add_to(sum_sq_[i], sum_sq_residual_[i], v * v);  // exact for float inputs
    }
    ++count_;
  }

  void add(const KavRecord& record) {
    if (record.label != class_id_) {
      throw UsageError("record " + std::to_string(record.record_index) + " has label " +
                       std::to_string(record.label) + ", accumulator is for class " +
                       std::to_string(class_id_));
    }
    add(record.kav);
  }

  void merge(const MomentAccumulator& other) {
    if (other.class_id_ != class_id_) {
      throw UsageError("cannot merge class " + std::to_string(other.class_id_) + " into class " +
                       std::to_string(class_id_));
    }
    if (other.dim() != dim()) {
      throw UsageError("cannot merge accumulators of dim " + std::to_string(other.dim()) +
                       " and " + std::to_string(dim()));
    }
    count_ += other.count_;
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      add_to(sum_[i], sum_residual_[i], other.sum_[i]);
      sum_residual_[i] += other.sum_residual_[i];
      add_to(sum_sq_[i], sum_sq_residual_[i], other.sum_sq_[i]);
      sum_sq_residual_[i] += other.sum_sq_residual_[i];
    }
  }

  bool operator==(const MomentAccumulator&) const = default;

 private:
  // Knuth two-sum: hi + x is rounded into hi, the lost low part goes to lo.
  static void add_to(double& hi, double& lo, double x) {
    const double s = hi + x;
    const double b = s - hi;
    lo += (hi - (s - b)) + (x - b);
    hi = s;
  }

  ClassId class_id_;
  std::uint64_t count_ = 0;
  std::vector<double> sum_;
  std::vector<double> sum_sq_;
  std::vector<double> sum_residual_;
  std::vector<double> sum_sq_residual_;
};

inline MomentAccumulator accumulate(MomentAccumulator acc, const KavRecord& record) {
  acc.add(record);
  return acc;
}

inline MomentAccumulator merge(MomentAccumulator a, const MomentAccumulator& b) {
  a.merge(b);
  return a;
}

struct ClassStats {
  ClassId class_id = 0;
  std::uint64_t count = 0;
  std::vector<double> mean;
  std::vector<double> variance;
  double variance_floor = kDefaultVarianceFloor;

  std::size_t dim() const { return mean.size(); }
  bool operator==(const ClassStats&) const = default;
};

inline ClassStats finalize(const MomentAccumulator& acc,
                           double variance_floor = kDefaultVarianceFloor) {
  if (!(variance_floor > 0.0) || !std::isfinite(variance_floor)) {
    throw UsageError("variance floor must be positive and finite");
  }
  if (acc.count() == 0) {
    throw UsageError("empty class " + std::to_string(acc.class_id()));
  }
  ClassStats s;
  s.class_id = acc.class_id();
  s.count = acc.count();
  s.variance_floor = variance_floor;
  s.mean.resize(acc.dim());
  s.variance.resize(acc.dim());
  const auto n = static_cast<long double>(acc.count());
  for (std::size_t i = 0; i < acc.dim(); ++i) {
    const long double sum = static_cast<long double>(acc.sum()[i]) + acc.sum_residual()[i];
    const long double sum_sq =
        static_cast<long double>(acc.sum_sq()[i]) + acc.sum_sq_residual()[i];
    const long double m = sum / n;
    s.mean[i] = static_cast<double>(m);
    s.variance[i] = std::max(static_cast<double>(sum_sq / n - m * m), variance_floor);
  }
  return s;
}

struct FittedModel {
  std::size_t dim = 0;
  double variance_floor = kDefaultVarianceFloor;
  std::map<ClassId, ClassStats> classes;

  const ClassStats& at(ClassId id) const {
    const auto it = classes.find(id);
    if (it == classes.end()) throw UsageError("unknown class " + std::to_string(id));
    return it->second;
  }
  bool operator==(const FittedModel&) const = default;
};

/// Accumulators for every class seen so far, keyed by class id.
class AccumulatorSet {
 public:
  explicit AccumulatorSet(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  const std::map<ClassId, MomentAccumulator>& classes() const { return classes_; }

  void add(const KavRecord& record) {
    if (record.label == kUnlabeled) {
      throw UsageError("unlabeled record " + std::to_string(record.record_index) +
                       " in training data");
    }
    if (record.kav.size() != dim_) {
      throw FormatError("record " + std::to_string(record.record_index) + " has dim " +
                        std::to_string(record.kav.size()) + ", expected " + std::to_string(dim_));
    }
    slot(record.label).add(record.kav);
  }

  void insert(MomentAccumulator acc) {
    if (acc.dim() != dim_) throw UsageError("accumulator dim mismatch");
    slot(acc.class_id()).merge(acc);
  }

  void merge(const AccumulatorSet& other) {
    if (other.dim_ != dim_) {
      throw UsageError("cannot merge accumulator sets of dim " + std::to_string(other.dim_) +
                       " and " + std::to_string(dim_));
    }
    for (const auto& [id, acc] : other.classes_) slot(id).merge(acc);
  }

  FittedModel finalize(double variance_floor = kDefaultVarianceFloor) const {
    if (classes_.empty()) throw UsageError("no training records");
    FittedModel model;
    model.dim = dim_;
    model.variance_floor = variance_floor;
    for (const auto& [id, acc] : classes_) {
      model.classes.emplace(id, kavguard::finalize(acc, variance_floor));
    }
    return model;
  }

  bool operator==(const AccumulatorSet&) const = default;

 private:
  MomentAccumulator& slot(ClassId id) {
    auto it = classes_.find(id);
    if (it == classes_.end()) it = classes_.emplace(id, MomentAccumulator(id, dim_)).first;
    return it->second;
  }

  std::size_t dim_;
  std::map<ClassId, MomentAccumulator> classes_;
};

namespace detail {

inline AccumulatorSet accumulate_block(std::span<const KavRecord> block, std::size_t dim) {
  AccumulatorSet set(dim);
  for (const auto& r : block) set.add(r);
  return set;
}

// Accumulates `records` block by block and merges each block into `total`
// in order.
inline void accumulate_blocks(AccumulatorSet& total, std::span<const KavRecord> records,
                              std::size_t threads) {
  const std::size_t blocks = (records.size() + kFitBlockRecords - 1) / kFitBlockRecords;
  std::vector<AccumulatorSet> partial(blocks, AccumulatorSet(total.dim()));
  parallel_for(blocks, threads, [&](std::size_t b) {
    const std::size_t lo = b * kFitBlockRecords;
    const std::size_t hi = std::min(records.size(), lo + kFitBlockRecords);
    partial[b] = accumulate_block(records.subspan(lo, hi - lo), total.dim());
  });
  for (const auto& p : partial) total.merge(p);
}

}  // namespace detail

/// Single scan over a reader. At most threads * kFitBlockRecords records are
/// held in memory at a time.
inline AccumulatorSet accumulate_stream(KavReader& reader, std::size_t threads = 1) {
  AccumulatorSet total(reader.header().dim);
  const std::size_t batch = std::max<std::size_t>(threads, 1) * kFitBlockRecords;
  std::vector<KavRecord> buffer;
  buffer.reserve(batch);
  while (true) {
    buffer.clear();
    while (buffer.size() < batch) {
      auto r = reader.next();
      if (!r) break;
      buffer.push_back(std::move(*r));
    }
    if (buffer.empty()) break;
    detail::accumulate_blocks(total, buffer, threads);
    if (buffer.size() < batch) break;
  }
  return total;
}

inline AccumulatorSet accumulate_dataset(const KavDataset& training, std::size_t threads = 1) {
  AccumulatorSet total(training.dim());
  detail::accumulate_blocks(total, training.records(), threads);
  return total;
}

inline FittedModel fit(const KavDataset& training, double variance_floor = kDefaultVarianceFloor,
                       std::size_t threads = 1) {
  return accumulate_dataset(training, threads).finalize(variance_floor);
}

inline FittedModel fit(KavReader& reader, double variance_floor = kDefaultVarianceFloor,
                       std::size_t threads = 1) {
  return accumulate_stream(reader, threads).finalize(variance_floor);
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr const char* kStatsFormat = "kav-stats/1";
inline constexpr const char* kAccumulatorsFormat = "kav-accumulators/1";

namespace detail {

inline void append_reals(std::string& buf, std::span<const double> values) {
  buf += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i != 0) buf += ',';
    buf += format_real(values[i]);
  }
  buf += ']';
}

inline std::vector<double> json_reals(const nlohmann::json& j, std::size_t dim,
                                      const std::string& what) {
  if (!j.is_array() || j.size() != dim) {
    throw FormatError(what + " must be an array of " + std::to_string(dim) + " reals");
  }
  std::vector<double> out;
  out.reserve(dim);
  for (const auto& v : j) {
    if (!v.is_number()) throw FormatError(what + " contains a non-number");
    out.push_back(v.get<double>());
  }
  return out;
}

inline nlohmann::json parse_json(std::istream& in, const char* expected_format) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format") || doc["format"] != expected_format) {
    throw FormatError(std::string("expected format \"") + expected_format + "\"");
  }
  return doc;
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

/// {format, dim, variance_floor, classes:[{id, count, mean, variance}]},
/// reals at 17 significant digits.
inline void write_stats_json(const FittedModel& model, std::ostream& out) {
  std::string buf = "{\"format\":\"";
  buf += kStatsFormat;
  buf += "\",\"dim\":" + std::to_string(model.dim);
  buf += ",\"variance_floor\":" + format_real(model.variance_floor);
  buf += ",\"classes\":[";
  bool first = true;
  for (const auto& [id, s] : model.classes) {
    buf += first ? "\n" : ",\n";
    first = false;
    buf += "{\"id\":" + std::to_string(id) + ",\"count\":" + std::to_string(s.count);
    buf += ",\"mean\":";
    detail::append_reals(buf, s.mean);
    buf += ",\"variance\":";
    detail::append_reals(buf, s.variance);
    buf += '}';
  }
  buf += "\n]}\n";
  out << buf;
  if (!out) throw IoError("failed writing stats");
}

inline FittedModel read_stats_json(std::istream& in) try {
  const auto doc = detail::parse_json(in, kStatsFormat);
  FittedModel model;
  model.dim = detail::json_get<std::size_t>(doc, "dim");
  model.variance_floor = detail::json_get<double>(doc, "variance_floor");
  if (model.dim == 0) throw FormatError("dim must be positive");
  if (!(model.variance_floor > 0.0)) throw FormatError("variance_floor must be positive");
  const auto& classes = doc.at("classes");
  if (!classes.is_array()) throw FormatError("classes must be an array");
  for (const auto& c : classes) {
    ClassStats s;
    s.class_id = detail::json_get<ClassId>(c, "id");
    s.count = detail::json_get<std::uint64_t>(c, "count");
    s.variance_floor = model.variance_floor;
    const auto where = " of class " + std::to_string(s.class_id);
    s.mean = detail::json_reals(c.at("mean"), model.dim, "mean" + where);
    s.variance = detail::json_reals(c.at("variance"), model.dim, "variance" + where);
    if (s.count == 0) throw FormatError("zero count" + where);
    for (double v : s.variance) {
      if (!(v >= model.variance_floor) || !std::isfinite(v)) {
        throw FormatError("variance below floor or non-finite" + where);
      }
    }
    for (double m : s.mean) {
      if (!std::isfinite(m)) throw FormatError("non-finite mean" + where);
    }
    if (!model.classes.emplace(s.class_id, std::move(s)).second) {
      throw FormatError("duplicate class id" + where);
    }
  }
  return model;
} catch (const nlohmann::json::exception& e) {
  throw FormatError(std::string("malformed stats file: ") + e.what());
}

/// Raw sums for later merging: {format, dim, classes:[{id, count, sum, sum_sq}]}.
inline void write_accumulators_json(const AccumulatorSet& set, std::ostream& out) {
  std::string buf = "{\"format\":\"";
  buf += kAccumulatorsFormat;
  buf += "\",\"dim\":" + std::to_string(set.dim());
  buf += ",\"classes\":[";
  bool first = true;
  for (const auto& [id, acc] : set.classes()) {
    buf += first ? "\n" : ",\n";
    first = false;
    buf += "{\"id\":" + std::to_string(id) + ",\"count\":" + std::to_string(acc.count());
    buf += ",\"sum\":";
    detail::append_reals(buf, acc.sum());
    buf += ",\"sum_sq\":";
    detail::append_reals(buf, acc.sum_sq());
    buf += ",\"sum_residual\":";
    detail::append_reals(buf, acc.sum_residual());
    buf += ",\"sum_sq_residual\":";
    detail::append_reals(buf, acc.sum_sq_residual());
    buf += '}';
  }
  buf += "\n]}\n";
  out << buf;
  if (!out) throw IoError("failed writing accumulators");
}

inline AccumulatorSet read_accumulators_json(std::istream& in) try {
  const auto doc = detail::parse_json(in, kAccumulatorsFormat);
  const auto dim = detail::json_get<std::size_t>(doc, "dim");
  if (dim == 0) throw FormatError("dim must be positive");
  AccumulatorSet set(dim);
  const auto& classes = doc.at("classes");
  if (!classes.is_array()) throw FormatError("classes must be an array");
  for (const auto& c : classes) {
    const auto id = detail::json_get<ClassId>(c, "id");
    const auto where = " of class " + std::to_string(id);
    if (set.classes().contains(id)) throw FormatError("duplicate class id" + where);
    std::vector<double> residuals[2];
    const char* residual_keys[2] = {"sum_residual", "sum_sq_residual"};
    for (int k = 0; k < 2; ++k) {
      if (c.contains(residual_keys[k])) {
        residuals[k] = detail::json_reals(c.at(residual_keys[k]), dim, residual_keys[k] + where);
      }
    }
    set.insert(MomentAccumulator(id, detail::json_get<std::uint64_t>(c, "count"),
                                 detail::json_reals(c.at("sum"), dim, "sum" + where),
                                 detail::json_reals(c.at("sum_sq"), dim, "sum_sq" + where),
                                 std::move(residuals[0]), std::move(residuals[1])));
  }
  return set;
} catch (const nlohmann::json::exception& e) {
  throw FormatError(std::string("malformed accumulator file: ") + e.what());
}

}  // namespace kavguard

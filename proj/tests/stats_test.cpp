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

#include "kavguard/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "gmock/gmock.h"
#include "gtest/gtest.h"
#include "test_util.hpp"

namespace kavguard {
namespace {

std::vector<double> as_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

using ::testing::ElementsAre;
using ::testing::HasSubstr;
using testing::max_rel_err;

KavRecord rec(ClassId label, std::vector<float> kav, std::uint64_t index = 0) {
  return KavRecord{index, label, std::nullopt, std::move(kav)};
}

// Two-pass textbook mean and population variance per class; the oracle for
// every fit test below.
struct TwoPass {
  std::map<ClassId, std::vector<double>> mean, variance;
};

TwoPass two_pass(const KavDataset& ds) {
  TwoPass out;
  std::map<ClassId, std::size_t> n;
  for (const auto& r : ds.records()) {
    auto& m = out.mean[r.label];
    m.resize(ds.dim(), 0.0);
    for (std::size_t k = 0; k < ds.dim(); ++k) m[k] += r.kav[k];
    ++n[r.label];
  }
  for (auto& [c, m] : out.mean) {
    for (auto& v : m) v /= static_cast<double>(n[c]);
  }
  for (const auto& r : ds.records()) {
    auto& v = out.variance[r.label];
    v.resize(ds.dim(), 0.0);
    for (std::size_t k = 0; k < ds.dim(); ++k) {
      const double d = r.kav[k] - out.mean[r.label][k];
      v[k] += d * d;
    }
  }
  for (auto& [c, v] : out.variance) {
    for (auto& x : v) x /= static_cast<double>(n[c]);
  }
  return out;
}

TEST(Accumulate, HandArithmetic) {
  MomentAccumulator acc(0, 2);
  acc = accumulate(acc, rec(0, {1, 3}));
  EXPECT_EQ(acc.count(), 1u);
  EXPECT_THAT(as_vector(acc.sum()), ElementsAre(1.0, 3.0));
  EXPECT_THAT(as_vector(acc.sum_sq()), ElementsAre(1.0, 9.0));
  acc = accumulate(acc, rec(0, {3, 5}));
  EXPECT_EQ(acc.count(), 2u);
  EXPECT_THAT(as_vector(acc.sum()), ElementsAre(4.0, 8.0));
  EXPECT_THAT(as_vector(acc.sum_sq()), ElementsAre(10.0, 34.0));
}

TEST(Accumulate, Errors) {
  MomentAccumulator acc(1, 2);
  EXPECT_THROW(acc.add(rec(0, {1, 2})), UsageError);
  EXPECT_THROW(acc.add(rec(1, {1, 2, 3})), FormatError);
}

TEST(Accumulate, StandardNormalMeanWithinThreeStandardErrors) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  MomentAccumulator acc(0, 4);
  for (int i = 0; i < 100000; ++i) {
    acc.add(std::vector<float>{normal(rng), normal(rng), normal(rng), normal(rng)});
  }
  const double bound = 3.0 / std::sqrt(1e5);
  for (double s : acc.sum()) EXPECT_LT(std::abs(s / 1e5), bound);
}

TEST(Accumulate, CauchySchwarzHoldsAfterAnyUpdates) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> offset(-1e3f, 1e3f);
  for (int trial = 0; trial < 50; ++trial) {
    MomentAccumulator acc(0, 3);
    for (double s : acc.sum()) EXPECT_EQ(s, 0.0);
    const float o = offset(rng);
    const int n = 1 + trial * 37;
    for (int i = 0; i < n; ++i) {
      acc.add(std::vector<float>{o + normal(rng), o, 1e-3f * normal(rng)});
    }
    for (std::size_t k = 0; k < 3; ++k) {
      const double lhs = acc.sum_sq()[k] * static_cast<double>(acc.count());
      const double rhs = acc.sum()[k] * acc.sum()[k];
      EXPECT_GE(lhs, rhs * (1.0 - 1e-9)) << "trial " << trial << " k " << k;
    }
  }
}

TEST(Merge, TwoElementsMatchSequential) {
  MomentAccumulator a(0, 2), b(0, 2), seq(0, 2);
  a.add(rec(0, {1, 3}));
  b.add(rec(0, {3, 5}));
  seq.add(rec(0, {1, 3}));
  seq.add(rec(0, {3, 5}));
  EXPECT_EQ(finalize(merge(a, b)), finalize(seq));
  EXPECT_EQ(finalize(merge(b, a)), finalize(seq));
}

TEST(Merge, EmptyIsIdentity) {
  MomentAccumulator a(3, 2);
  a.add(std::vector<float>{1.5f, -2.0f});
  EXPECT_EQ(merge(a, MomentAccumulator(3, 2)), a);
  EXPECT_EQ(merge(MomentAccumulator(3, 2), a), a);
}

TEST(Merge, MismatchIsUsageError) {
  EXPECT_THROW(merge(MomentAccumulator(0, 2), MomentAccumulator(1, 2)), UsageError);
  EXPECT_THROW(merge(MomentAccumulator(0, 2), MomentAccumulator(0, 3)), UsageError);
}

TEST(Merge, SevenShardsMatchSinglePass) {
  std::mt19937_64 rng(5);
  const auto ds = testing::random_labeled(rng, 16, 3, 10000);
  const auto single = fit(ds);

  std::uniform_int_distribution<std::size_t> cut(1, ds.size() - 1);
  std::vector<std::size_t> cuts{0, ds.size()};
  for (int i = 0; i < 6; ++i) cuts.push_back(cut(rng));
  std::sort(cuts.begin(), cuts.end());
  AccumulatorSet merged(ds.dim());
  for (std::size_t s = 0; s + 1 < cuts.size(); ++s) {
    AccumulatorSet shard(ds.dim());
    for (std::size_t i = cuts[s]; i < cuts[s + 1]; ++i) shard.add(ds[i]);
    merged.merge(shard);
  }
  const auto model = merged.finalize();
  ASSERT_EQ(model.classes.size(), single.classes.size());
  for (const auto& [id, s] : single.classes) {
    EXPECT_LE(max_rel_err(model.at(id).mean, s.mean), 1e-12);
    EXPECT_LE(max_rel_err(model.at(id).variance, s.variance), 1e-12);
    EXPECT_EQ(model.at(id).count, s.count);
  }
}

TEST(Finalize, HandArithmeticPopulationVariance) {
  MomentAccumulator acc(0, 2);
  acc.add(std::vector<float>{1, 3});
  acc.add(std::vector<float>{3, 5});
  const auto s = finalize(acc, 1e-12);
  EXPECT_THAT(s.mean, ElementsAre(2.0, 4.0));
  EXPECT_THAT(s.variance, ElementsAre(1.0, 1.0));
  EXPECT_EQ(s.count, 2u);
}

TEST(Finalize, DegenerateClassIsFloored) {
  MomentAccumulator acc(0, 1);
  acc.add(std::vector<float>{5});
  const auto s = finalize(acc, 1e-12);
  EXPECT_THAT(s.mean, ElementsAre(5.0));
  EXPECT_THAT(s.variance, ElementsAre(1e-12));
}

TEST(Finalize, Errors) {
  EXPECT_THAT([] { finalize(MomentAccumulator(4, 2)); },
              ::testing::ThrowsMessage<UsageError>(HasSubstr("empty class 4")));
  MomentAccumulator acc(0, 1);
  acc.add(std::vector<float>{1});
  EXPECT_THROW(finalize(acc, 0.0), UsageError);
  EXPECT_THROW(finalize(acc, -1.0), UsageError);
}

TEST(Finalize, Idempotent) {
  MomentAccumulator acc(0, 3);
  acc.add(std::vector<float>{1, 2, 3});
  acc.add(std::vector<float>{2, 2, 7});
  EXPECT_EQ(finalize(acc), finalize(acc));
}

TEST(Finalize, KnownGaussianWithinThreeStandardErrors) {
  constexpr int n = 100000;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> a(0.0, 1.0), b(10.0, 2.0);
  KavDataset ds(2, 1, false);
  ds.reserve(n);
  for (int i = 0; i < n; ++i) {
    ds.push_back(0, {static_cast<float>(a(rng)), static_cast<float>(b(rng))});
  }
  const auto s = fit(ds).at(0);
  const auto oracle = two_pass(ds);
  const double true_mean[2] = {0.0, 10.0}, true_var[2] = {1.0, 4.0};
  for (int k = 0; k < 2; ++k) {
    EXPECT_LT(std::abs(s.mean[k] - true_mean[k]), 3.0 * std::sqrt(true_var[k] / n));
    // Var of the sample variance for a Gaussian is 2 sigma^4 / n.
    EXPECT_LT(std::abs(s.variance[k] - true_var[k]), 3.0 * true_var[k] * std::sqrt(2.0 / n));
    EXPECT_LE(testing::rel_err(s.variance[k], oracle.variance.at(0)[k]), 1e-10);
  }
}

TEST(Fit, TwoClassesTwoRecords) {
  KavDataset ds(2, 2, false);
  ds.push_back(0, {1, 3});
  ds.push_back(1, {0, 0});
  ds.push_back(0, {3, 5});
  ds.push_back(1, {2, 4});
  const auto m = fit(ds);
  EXPECT_EQ(m.dim, 2u);
  EXPECT_THAT(m.at(0).mean, ElementsAre(2.0, 4.0));
  EXPECT_THAT(m.at(0).variance, ElementsAre(1.0, 1.0));
  EXPECT_THAT(m.at(1).mean, ElementsAre(1.0, 2.0));
  EXPECT_THAT(m.at(1).variance, ElementsAre(1.0, 4.0));
}

TEST(Fit, AbsentClassesAreAbsent) {
  KavDataset ds(1, 5, false);
  ds.push_back(3, {1});
  const auto m = fit(ds);
  EXPECT_EQ(m.classes.size(), 1u);
  EXPECT_TRUE(m.classes.contains(3));
  EXPECT_THROW(m.at(0), UsageError);
}

TEST(Fit, UnlabeledRecordNamesIndex) {
  KavDataset ds(1, 2, false);
  ds.push_back(0, {1});
  ds.push_back(kUnlabeled, {1});
  EXPECT_THAT([&] { fit(ds); },
              ::testing::ThrowsMessage<UsageError>(HasSubstr("unlabeled record 1")));
}

TEST(Fit, EmptyTrainingSetIsUsageError) {
  EXPECT_THROW(fit(KavDataset(3, 2, false)), UsageError);
}

TEST(Fit, PermutationInvariant) {
  std::mt19937_64 rng(21);
  const auto ds = testing::random_labeled(rng, 8, 4, 5000);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  KavDataset shuffled(ds.dim(), ds.num_classes(), false);
  for (auto i : order) shuffled.push_back(ds[i].label, ds[i].kav);
  const auto a = fit(ds), b = fit(shuffled);
  for (const auto& [id, s] : a.classes) {
    EXPECT_LE(max_rel_err(b.at(id).mean, s.mean), 1e-12);
    EXPECT_LE(max_rel_err(b.at(id).variance, s.variance), 1e-12);
  }
}

TEST(Fit, MatchesTwoPassOracle) {
  std::mt19937_64 rng(33);
  const auto ds = testing::random_labeled(rng, 64, 5, 20000);
  const auto m = fit(ds);
  const auto oracle = two_pass(ds);
  for (const auto& [id, s] : m.classes) {
    EXPECT_LE(max_rel_err(s.mean, oracle.mean.at(id)), 1e-10);
    EXPECT_LE(max_rel_err(s.variance, oracle.variance.at(id)), 1e-10);
  }
}

TEST(Fit, IndependentOfThreadCountAndSource) {
  std::mt19937_64 rng(34);
  const auto ds = testing::random_labeled(rng, 12, 3, 3 * kFitBlockRecords + 17);
  const auto one = fit(ds, kDefaultVarianceFloor, 1);
  EXPECT_EQ(fit(ds, kDefaultVarianceFloor, 3), one);
  EXPECT_EQ(fit(ds, kDefaultVarianceFloor, 8), one);
  for (std::size_t threads : {1u, 2u, 5u}) {
    std::istringstream in(testing::serialize_kav(ds));
    KavReader reader(in);
    EXPECT_EQ(fit(reader, kDefaultVarianceFloor, threads), one) << threads;
  }
}

TEST(StatsJson, RoundTripIsExact) {
  std::mt19937_64 rng(8);
  const auto model = fit(testing::random_labeled(rng, 10, 3, 300), 1e-9);
  std::stringstream ss;
  write_stats_json(model, ss);
  EXPECT_THAT(ss.str(), HasSubstr("\"format\":\"kav-stats/1\""));
  const auto back = read_stats_json(ss);
  EXPECT_EQ(back, model);
}

TEST(StatsJson, RejectsMalformed) {
  for (const char* text : {
           "not json",
           R"({"format":"other"})",
           R"({"format":"kav-stats/1","dim":1,"variance_floor":1e-12})",
           R"({"format":"kav-stats/1","dim":2,"variance_floor":1e-12,"classes":[{"id":0,"count":1,"mean":[1],"variance":[1,1]}]})",
           R"({"format":"kav-stats/1","dim":1,"variance_floor":1e-12,"classes":[{"id":0,"count":1,"mean":[1],"variance":[0]}]})",
           R"({"format":"kav-stats/1","dim":1,"variance_floor":1e-12,"classes":[{"id":0,"count":1,"mean":[1],"variance":[1]},{"id":0,"count":1,"mean":[1],"variance":[1]}]})",
       }) {
    std::istringstream in(text);
    EXPECT_THROW(read_stats_json(in), FormatError) << text;
  }
}

TEST(AccumulatorJson, RoundTripIsExact) {
  std::mt19937_64 rng(12);
  const auto set = accumulate_dataset(testing::random_labeled(rng, 7, 4, 500));
  std::stringstream ss;
  write_accumulators_json(set, ss);
  EXPECT_EQ(read_accumulators_json(ss), set);
}

TEST(AccumulatorJson, ResidualsAreOptional) {
  std::istringstream in(
      R"({"format":"kav-accumulators/1","dim":2,"classes":[{"id":3,"count":2,"sum":[4,8],"sum_sq":[10,34]}]})");
  const auto set = read_accumulators_json(in);
  const auto s = set.finalize().at(3);
  EXPECT_THAT(s.mean, ElementsAre(2.0, 4.0));
  EXPECT_THAT(s.variance, ElementsAre(1.0, 1.0));
}

TEST(Merge, SplitPointsDoNotChangeFinalStats) {
  // Large offsets relative to the spread make the variance sensitive to
  // summation order unless rounding error is carried along.
  std::mt19937_64 rng(13);
  const auto ds = testing::random_labeled(rng, 16, 1, 20000, 300.0, 0.0);
  const auto records = ds.records();
  std::optional<ClassStats> first;
  for (std::size_t shards : {1u, 2u, 7u, 13u, 64u}) {
    MomentAccumulator total(0, 16);
    for (std::size_t s = 0; s < shards; ++s) {
      MomentAccumulator part(0, 16);
      for (std::size_t i = s * records.size() / shards; i < (s + 1) * records.size() / shards; ++i) {
        part.add(records[i]);
      }
      total.merge(part);
    }
    const auto stats = finalize(total);
    if (!first) {
      first = stats;
      continue;
    }
    EXPECT_LE(max_rel_err(stats.mean, first->mean), 1e-15) << shards;
    EXPECT_LE(max_rel_err(stats.variance, first->variance), 1e-13) << shards;
  }
}

}  // namespace
}  // namespace kavguard

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

// Seeded synthetic KAV datasets drawn from known diagonal Gaussians, for
// demos and tests when no network is at hand.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "kavguard/error.hpp"
#include "kavguard/kav_store.hpp"

namespace kavguard {

struct SynthConfig {
  std::uint32_t num_classes = 10;
  std::uint32_t dim = 64;
  std::uint32_t per_class = 100;
  double mean_scale = 3.0;   // class means ~ N(0, mean_scale^2) per dimension
  double noise_sigma = 0.0;  // extra N(0, (noise_sigma * stddev)^2) corruption
  bool with_logits = false;
  bool unlabeled = false;    // write every label as kUnlabeled
  std::uint64_t seed = 0;
};

/// Ground truth of a synthetic draw. Class means depend only on the seed,
/// num_classes and dim, so train and test sets generated with the same
/// values share classes.
struct SynthTruth {
  std::vector<std::vector<double>> means;  // [class][dim]
  std::vector<double> stddev;              // shared per-dimension stddev
};

inline SynthTruth synth_truth(const SynthConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.5, 2.0);
  SynthTruth t;
  t.stddev.resize(cfg.dim);
  for (auto& s : t.stddev) s = uniform(rng);
  t.means.assign(cfg.num_classes, std::vector<double>(cfg.dim));
  for (auto& m : t.means) {
    for (auto& v : m) v = cfg.mean_scale * normal(rng);
  }
  return t;
}

/// Records are emitted class by class, per_class records each. Class
/// parameters come from cfg.seed and samples from `sample_seed`, so a test
/// set is a fresh draw from the training classes.
inline KavDataset synth_dataset(const SynthConfig& cfg, std::uint64_t sample_seed) {
  if (cfg.num_classes == 0 || cfg.dim == 0) throw UsageError("synth: classes and dim must be positive");
  if (!(cfg.noise_sigma >= 0.0) || !std::isfinite(cfg.mean_scale)) {
    throw UsageError("synth: noise_sigma must be >= 0 and mean_scale finite");
  }
  const auto truth = synth_truth(cfg);
  std::mt19937_64 rng(sample_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  KavDataset ds(cfg.dim, cfg.num_classes, cfg.with_logits);
  ds.reserve(static_cast<std::size_t>(cfg.num_classes) * cfg.per_class);
  for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
    for (std::uint32_t i = 0; i < cfg.per_class; ++i) {
      std::vector<float> kav(cfg.dim);
      for (std::uint32_t k = 0; k < cfg.dim; ++k) {
        double v = truth.means[c][k] + truth.stddev[k] * normal(rng);
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * truth.stddev[k] * normal(rng);
        kav[k] = static_cast<float>(v);
      }
      std::optional<std::vector<float>> logits;
      if (cfg.with_logits) {
        // Class log-likelihood up to a shared constant.
        std::vector<float> l(cfg.num_classes);
        for (std::uint32_t j = 0; j < cfg.num_classes; ++j) {
          double acc = 0.0;
          for (std::uint32_t k = 0; k < cfg.dim; ++k) {
            const double z = (kav[k] - truth.means[j][k]) / truth.stddev[k];
            acc += z * z;
          }
          l[j] = static_cast<float>(-0.5 * acc);
        }
        logits = std::move(l);
      }
      ds.push_back(cfg.unlabeled ? kUnlabeled : static_cast<ClassId>(c), std::move(kav),
                   std::move(logits));
    }
  }
  return ds;
}

}  // namespace kavguard

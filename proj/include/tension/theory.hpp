// Copyright 2026 The Tension Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================
//
// Numerical check that loss thresholding cannot separate minority samples
// from dirty-label poisons: when the identification model's class
// probabilities on clean group and poison samples share a variance small
// enough against their mean gap, the clean group's loss is smaller with
// probability arbitrarily close to one (one-sided Cantelli tail bound).
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

// Monte Carlo draws run in fixed-size batches with per-batch derived
// seeds; results are reduced in batch order.
inline constexpr std::size_t kMcBatchSize = 1 << 16;

enum class ProbFamily { Beta, TruncatedGaussian };

// Distribution of a class probability on (0,1], parameterized by mean and
// standard deviation. For the truncated Gaussian the parameters describe
// the pre-truncation normal.
struct ClassProbDistribution {
  ProbFamily family = ProbFamily::Beta;
  double mean = 0.5;
  double stddev = 0.1;
  double alpha = 0.0, beta = 0.0;  // Beta only

  static ClassProbDistribution make_beta(double mean, double stddev);
  static ClassProbDistribution make_truncated_gaussian(double mean, double stddev);
  static ClassProbDistribution make(ProbFamily family, double mean, double stddev);

  double sample(std::mt19937_64& rng) const;
};

// One-sided tail bound sigma^2 / (sigma^2 + t^2); requires t > 0.
double cantelli_bound(double sigma, double t);

// sqrt(1/sqrt(1-eps) - 1) * (mu_c - mu_p) / 2; the largest shared standard
// deviation for which P(L(G_c) < L(G_p)) > 1 - eps is guaranteed.
double theorem1_sigma_bound(double epsilon, double mu_c, double mu_p);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

// Estimates P(-log G_c < -log G_p) over n independent pairs.
McEstimate mc_loss_comparison(const ClassProbDistribution& dist_c,
                              const ClassProbDistribution& dist_p, std::size_t n,
                              std::uint64_t seed);

struct Lemma1Report {
  std::map<GroupLabel, double> clean_class_prob;  // expected true-class probability
  double poison_class_prob = 0.0;                 // expected assigned-label probability
  GroupLabel poison_base{0, 0};
  // max |p + p* - 1| over poison feature rows, p/p* on the two labels
  double complement_residual = 0.0;
  bool poison_is_strict_min = false;
};

// Empirical expected class probabilities per group on a binary task with
// label-flipped poisons present in the dataset.
Lemma1Report lemma1_check(const ModelParams& identification_model, const Dataset& ds);

struct TheoremCheckConfig {
  std::vector<double> epsilons{0.05, 0.1, 0.2, 0.4};
  double mu_c = 0.7;
  double mu_p = 0.3;
  std::size_t n_samples = 1000000;
  std::uint64_t seed = 0;
  ProbFamily family = ProbFamily::Beta;
};

struct TheoremGridPoint {
  double epsilon = 0.0;
  double sigma = 0.0;
  double estimate = 0.0;
  double std_error = 0.0;
  double threshold = 0.0;  // (1 - eps) - 3 * std_error
  bool pass = false;
  bool skipped = false;
  std::string note;
};

// For each epsilon, sets sigma exactly to the bound and requires the
// Monte Carlo estimate to clear (1 - eps) - 3 SE. Unrealizable (mean,
// sigma) pairs are skipped with a note.
std::vector<TheoremGridPoint> verify_theorem1(const TheoremCheckConfig& cfg);

// CSV rows (epsilon, sigma, estimate, stderr, threshold, pass).
std::string theorem_report_csv(const std::vector<TheoremGridPoint>& points);

}  // namespace tension

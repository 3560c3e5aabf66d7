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
#include "tension/theory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tension {

ClassProbDistribution ClassProbDistribution::make_beta(double mean, double stddev) {
  if (mean <= 0.0 || mean >= 1.0)
    throw DomainError("ClassProbDistribution: mean outside (0,1)");
  if (stddev < 0.0) throw DomainError("ClassProbDistribution: negative stddev");
  ClassProbDistribution d;
  d.family = ProbFamily::Beta;
  d.mean = mean;
  d.stddev = stddev;
  if (stddev > 0.0) {
    const double var = stddev * stddev;
    if (var >= mean * (1.0 - mean))
      throw DomainError("ClassProbDistribution: (mean, stddev) not realizable by Beta");
    const double nu = mean * (1.0 - mean) / var - 1.0;
    d.alpha = mean * nu;
    d.beta = (1.0 - mean) * nu;
  }
  return d;
}

ClassProbDistribution ClassProbDistribution::make_truncated_gaussian(double mean,
                                                                     double stddev) {
  if (mean <= 0.0 || mean > 1.0)
    throw DomainError("ClassProbDistribution: mean outside (0,1]");
  if (stddev < 0.0) throw DomainError("ClassProbDistribution: negative stddev");
  ClassProbDistribution d;
  d.family = ProbFamily::TruncatedGaussian;
  d.mean = mean;
  d.stddev = stddev;
  return d;
}

ClassProbDistribution ClassProbDistribution::make(ProbFamily family, double mean,
                                                  double stddev) {
  return family == ProbFamily::Beta ? make_beta(mean, stddev)
                                    : make_truncated_gaussian(mean, stddev);
}

double ClassProbDistribution::sample(std::mt19937_64& rng) const {
  if (stddev == 0.0) return mean;
  if (family == ProbFamily::Beta) {
    std::gamma_distribution<double> ga(alpha, 1.0);
    std::gamma_distribution<double> gb(beta, 1.0);
    const double x = ga(rng);
    const double y = gb(rng);
    const double v = x / (x + y);
    // Keep the support inside (0,1]; underflow to 0 is astronomically rare.
    return std::max(v, 1e-300);
  }
  std::normal_distribution<double> normal(mean, stddev);
  for (;;) {
    const double v = normal(rng);
    if (v > 0.0 && v <= 1.0) return v;
  }
}

double cantelli_bound(double sigma, double t) {
  if (t <= 0.0) throw DomainError("cantelli_bound: t must be > 0");
  if (sigma < 0.0) throw DomainError("cantelli_bound: negative sigma");
  const double s2 = sigma * sigma;
  return s2 / (s2 + t * t);
}

double theorem1_sigma_bound(double epsilon, double mu_c, double mu_p) {
  if (epsilon <= 0.0 || epsilon >= 1.0)
    throw DomainError("theorem1_sigma_bound: epsilon outside (0,1)");
  if (mu_p >= mu_c)
    throw DomainError("theorem1_sigma_bound: requires mu_p < mu_c");
  return std::sqrt(1.0 / std::sqrt(1.0 - epsilon) - 1.0) * (mu_c - mu_p) / 2.0;
}

McEstimate mc_loss_comparison(const ClassProbDistribution& dist_c,
                              const ClassProbDistribution& dist_p, std::size_t n,
                              std::uint64_t seed) {
  if (n == 0) throw DomainError("mc_loss_comparison: n must be > 0");
  std::size_t hits = 0;
  std::size_t done = 0;
  std::uint64_t batch = 0;
  while (done < n) {
    const std::size_t count = std::min(kMcBatchSize, n - done);
    auto rng = make_rng(seed, batch++);
    for (std::size_t i = 0; i < count; ++i) {
      const double gc = dist_c.sample(rng);
      const double gp = dist_p.sample(rng);
      if (-std::log(gc) < -std::log(gp)) ++hits;
    }
    done += count;
  }
  McEstimate est;
  est.n = n;
  est.estimate = static_cast<double>(hits) / static_cast<double>(n);
  est.std_error =
      std::sqrt(est.estimate * (1.0 - est.estimate) / static_cast<double>(n));
  return est;
}

Lemma1Report lemma1_check(const ModelParams& identification_model, const Dataset& ds) {
  if (ds.n_classes != 2 || identification_model.n_classes != 2)
    throw DomainError("lemma1_check: binary task required");

  const Eigen::MatrixXd probs = forward_probs(identification_model, ds.features);

  Lemma1Report report;
  std::map<GroupLabel, std::pair<double, std::size_t>> clean_sums;
  double poison_sum = 0.0;
  std::size_t poison_count = 0;
  bool saw_poison = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.is_poison(i)) {
      poison_sum += probs(static_cast<Eigen::Index>(i), ds.labels[i]);
      ++poison_count;
      report.poison_base = ds.groups[i];
      saw_poison = true;
      // Complement identity on this very feature row.
      const double residual = std::abs(probs(static_cast<Eigen::Index>(i), 0) +
                                       probs(static_cast<Eigen::Index>(i), 1) - 1.0);
      report.complement_residual = std::max(report.complement_residual, residual);
    } else {
      auto& [sum, count] = clean_sums[ds.groups[i]];
      sum += probs(static_cast<Eigen::Index>(i), ds.groups[i].class_label);
      ++count;
    }
  }
  if (!saw_poison) throw DomainError("lemma1_check: dataset has no poisons");
  if (clean_sums.empty()) throw DomainError("lemma1_check: dataset has no clean groups");

  for (const auto& [g, sc] : clean_sums)
    report.clean_class_prob[g] = sc.first / static_cast<double>(sc.second);
  report.poison_class_prob = poison_sum / static_cast<double>(poison_count);

  report.poison_is_strict_min = true;
  for (const auto& [g, p] : report.clean_class_prob)
    if (report.poison_class_prob >= p) report.poison_is_strict_min = false;
  return report;
}

std::vector<TheoremGridPoint> verify_theorem1(const TheoremCheckConfig& cfg) {
  if (cfg.n_samples < 10000)
    throw ConfigError("verify_theorem1: need at least 1e4 samples");
  if (cfg.mu_p >= cfg.mu_c) throw ConfigError("verify_theorem1: requires mu_p < mu_c");

  std::vector<TheoremGridPoint> points;
  std::uint64_t stream = 0;
  for (double eps : cfg.epsilons) {
    TheoremGridPoint pt;
    pt.epsilon = eps;
    pt.sigma = theorem1_sigma_bound(eps, cfg.mu_c, cfg.mu_p);
    try {
      const auto dist_c = ClassProbDistribution::make(cfg.family, cfg.mu_c, pt.sigma);
      const auto dist_p = ClassProbDistribution::make(cfg.family, cfg.mu_p, pt.sigma);
      const McEstimate est =
          mc_loss_comparison(dist_c, dist_p, cfg.n_samples, mix_seed(cfg.seed, stream));
      pt.estimate = est.estimate;
      pt.std_error = est.std_error;
      pt.threshold = (1.0 - eps) - 3.0 * est.std_error;
      pt.pass = pt.estimate > pt.threshold;
    } catch (const DomainError& e) {
      pt.skipped = true;
      pt.note = e.what();
    }
    ++stream;
    points.push_back(pt);
  }
  return points;
}

std::string theorem_report_csv(const std::vector<TheoremGridPoint>& points) {
  std::ostringstream out;
  out << "epsilon,sigma,estimate,stderr,threshold,pass\n";
  for (const auto& p : points) {
    if (p.skipped) {
      out << p.epsilon << ',' << p.sigma << ",,,,skipped\n";
      continue;
    }
    out << p.epsilon << ',' << p.sigma << ',' << p.estimate << ',' << p.std_error
        << ',' << p.threshold << ',' << (p.pass ? "true" : "false") << '\n';
  }
  return out.str();
}

}  // namespace tension

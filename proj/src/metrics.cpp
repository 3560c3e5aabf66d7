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
#include "tension/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace tension {

GroupAccuracies GroupAccuracies::from_eval(const EvalResult& eval) {
  GroupAccuracies ga;
  ga.per_group = eval.group_accuracy;
  if (eval.poison_accuracy)  // poisons reported as their own pseudo-group
    ga.per_group[GroupLabel{-1, -1}] = *eval.poison_accuracy;
  ga.overall = eval.overall_accuracy;
  return ga;
}

double wga(const GroupAccuracies& accuracies) {
  if (accuracies.per_group.empty()) throw DomainError("wga: no groups present");
  double worst = 1.0;
  for (const auto& [g, acc] : accuracies.per_group) worst = std::min(worst, acc);
  return worst;
}

double wga(const EvalResult& eval) {
  if (eval.group_accuracy.empty()) throw DomainError("wga: no groups present");
  double worst = 1.0;
  for (const auto& [g, acc] : eval.group_accuracy) worst = std::min(worst, acc);
  return worst;
}

std::optional<double> asr_dlbd(const ModelParams& m, const Dataset& clean_test,
                               const TriggerPattern& trigger, int target_class) {
  trigger.validate(clean_test.dim);
  if (target_class < 0 || target_class >= m.n_classes)
    throw DomainError("asr_dlbd: target class out of range");
  const std::vector<int> clean_pred = predict_classes(m, clean_test.features);
  Eigen::MatrixXd triggered = clean_test.features;
  for (std::size_t i = 0; i < trigger.coordinates.size(); ++i)
    triggered.col(trigger.coordinates[i]).setConstant(trigger.values[i]);
  const std::vector<int> trig_pred = predict_classes(m, triggered);

  std::size_t correct = 0, flipped = 0;
  for (std::size_t i = 0; i < clean_test.size(); ++i) {
    if (clean_pred[i] != clean_test.labels[i]) continue;
    ++correct;
    if (trig_pred[i] != clean_test.labels[i]) ++flipped;
  }
  if (correct == 0) return std::nullopt;
  return static_cast<double>(flipped) / static_cast<double>(correct);
}

double asr_gm(const ModelParams& m, const std::vector<Sample>& targets,
              int adversarial_class) {
  if (targets.empty()) throw DomainError("asr_gm: no targets");
  std::size_t missed = 0;
  for (const auto& t : targets) {
    if (t.label == adversarial_class)
      throw DomainError("asr_gm: target labeled as the adversarial class");
    if (predict_class(forward(m, t.features).probs) != t.label) ++missed;
  }
  return static_cast<double>(missed) / static_cast<double>(targets.size());
}

std::optional<double> asr_sa(const ModelParams& poisoned_model,
                             const ModelParams& clean_baseline,
                             const Dataset& target_group_test) {
  if (target_group_test.empty()) throw DomainError("asr_sa: empty target group");
  const auto acc = [&](const ModelParams& m) {
    const std::vector<int> pred = predict_classes(m, target_group_test.features);
    std::size_t good = 0;
    for (std::size_t i = 0; i < target_group_test.size(); ++i)
      good += pred[i] == target_group_test.labels[i];
    return static_cast<double>(good) / static_cast<double>(target_group_test.size());
  };
  const double clean = acc(clean_baseline);
  if (clean == 0.0) return std::nullopt;
  return (clean - acc(poisoned_model)) / clean;
}

namespace {

std::optional<double> member_fraction(const std::set<std::int64_t>& selected,
                                      const std::vector<std::int64_t>& members) {
  if (members.empty()) return std::nullopt;
  std::size_t hit = 0;
  for (std::int64_t id : members) hit += selected.count(id);
  return static_cast<double>(hit) / static_cast<double>(members.size());
}

}  // namespace

std::optional<double> idnf(const std::set<std::int64_t>& amplified,
                           const std::vector<std::int64_t>& group_members) {
  return member_fraction(amplified, group_members);
}

std::optional<double> elmf(const std::set<std::int64_t>& eliminated,
                           const std::vector<std::int64_t>& group_members) {
  return member_fraction(eliminated, group_members);
}

MetricsReport aggregate_runs(const std::vector<RunValues>& runs) {
  if (runs.empty()) throw DomainError("aggregate_runs: no runs");
  for (const auto& run : runs) {
    if (run.size() != runs.front().size())
      throw DomainError("aggregate_runs: run schema mismatch");
    for (const auto& [key, value] : run)
      if (!runs.front().count(key))
        throw DomainError("aggregate_runs: run schema mismatch on key " + key);
  }
  MetricsReport report;
  const int n = static_cast<int>(runs.size());
  for (const auto& [key, first] : runs.front()) {
    double sum = 0.0;
    for (const auto& run : runs) sum += run.at(key);
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& run : runs) {
      const double d = run.at(key) - mean;
      ss += d * d;
    }
    report[key] = Aggregated{mean, n > 1 ? std::sqrt(ss / (n - 1)) : 0.0, n};
  }
  return report;
}

nlohmann::ordered_json report_to_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  for (const auto& [key, agg] : report) {
    j[key + "_mean"] = agg.mean;
    j[key + "_std"] = agg.stddev;
  }
  if (!report.empty()) j["n_runs"] = report.begin()->second.n_runs;
  return j;
}

}  // namespace tension

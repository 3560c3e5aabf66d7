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
// Run measurements: overall/worst-group accuracy, per-attack success
// rates, identification and elimination factors, and mean/std aggregation
// over repeated runs.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tension/attacks.hpp"
#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

struct GroupAccuracies {
  std::map<GroupLabel, double> per_group;
  double overall = 0.0;

  static GroupAccuracies from_eval(const EvalResult& eval);
};

// Minimum accuracy over present groups; throws DomainError when none.
double wga(const GroupAccuracies& accuracies);
double wga(const EvalResult& eval);

// Among test samples correctly classified without the trigger, the
// fraction misclassified once it is applied. Absent when nothing is
// correctly classified to begin with.
std::optional<double> asr_dlbd(const ModelParams& m, const Dataset& clean_test,
                               const TriggerPattern& trigger, int target_class);

// Fraction of targets not classified as their true label.
double asr_gm(const ModelParams& m, const std::vector<Sample>& targets,
              int adversarial_class);

// Relative accuracy drop on the attacked group: (clean - poisoned) / clean.
// Negative when the defense/poisoning ends up helping; absent when the
// clean baseline scores zero.
std::optional<double> asr_sa(const ModelParams& poisoned_model,
                             const ModelParams& clean_baseline,
                             const Dataset& target_group_test);

// |selected ∩ group| / |group|; absent for an empty group.
std::optional<double> idnf(const std::set<std::int64_t>& amplified,
                           const std::vector<std::int64_t>& group_members);
std::optional<double> elmf(const std::set<std::int64_t>& eliminated,
                           const std::vector<std::int64_t>& group_members);

struct Aggregated {
  double mean = 0.0;
  double stddev = 0.0;  // (n-1) denominator; 0 when n == 1
  int n_runs = 0;
};

using RunValues = std::map<std::string, double>;
using MetricsReport = std::map<std::string, Aggregated>;

// Per-key sample mean and standard deviation; all runs must share the
// same key set (DomainError otherwise).
MetricsReport aggregate_runs(const std::vector<RunValues>& runs);

// Flat {key_mean, key_std, ...} document plus n_runs.
nlohmann::ordered_json report_to_json(const MetricsReport& report);

}  // namespace tension

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
// Centralized poisoning defenses. The iterative defense eliminates
// training samples whose last-layer gradient features sit isolated in
// gradient space; the run-time detector flags inputs whose prediction
// entropy under superimposed clean overlays is abnormally low.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tension/group_robust.hpp"
#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

struct EpicConfig {
  int warmup_epochs = 2;          // checks start after this many epochs
  int check_period = 1;
  double medoid_fraction = 0.1;   // share of the active set used as medoids
  int isolation_patience = 2;     // consecutive flagged checks before removal
  std::optional<int> stop_epoch;  // no checks after this epoch; 0 disables all
  double isolation_radius_scale = 2.0;
  TrainConfig train;
  bool audit_batches = false;     // record per-epoch batch ids (tests)
};

struct EliminationRecord {
  std::int64_t id;
  GroupLabel group;
  AttackKind provenance;
};

struct EliminationLog {
  std::map<int, std::vector<EliminationRecord>> by_epoch;

  std::set<std::int64_t> all_eliminated() const;
  std::set<std::int64_t> eliminated_through(int epoch) const;
  bool empty() const { return by_epoch.empty(); }
};

// Ids of active samples isolated in gradient space: medoids are the most
// central ceil(fraction*n) feature points, the covering radius is the
// smallest radius putting ceil((1-fraction)*n) points within a medoid,
// and a sample is isolated when its nearest-medoid distance exceeds
// radius_scale times that.
std::set<std::int64_t> epic_isolation_flags(const ModelParams& m,
                                            const Dataset& active,
                                            double medoid_fraction,
                                            double radius_scale,
                                            std::uint64_t seed);

struct EpicResult {
  ModelParams params;
  EliminationLog log;
  std::set<std::int64_t> flagged_any;  // flagged at any check, eliminated or not
  std::set<std::int64_t> final_active;
  TrainLog train_log;
  std::vector<std::set<std::int64_t>> epoch_batch_ids;  // when audit_batches
};

// SGD with periodic isolation checks; ids isolated for `patience`
// consecutive checks leave the active set. Ideal eliminates only poison
// ids among the candidates; Worst additionally drops every minority-group
// id at the first check. Aborts if an elimination would empty a class.
EpicResult epic_train(const Dataset& train, const EpicConfig& cfg,
                      Intervention intervention, const Dataset* val = nullptr);

struct StripConfig {
  int overlays = 8;          // R
  double blend_weight = 0.5;
  std::vector<double> thresholds;
};

// Mean Shannon entropy of predictions over `overlays` blends
// (1-w)*x + w*x_r with clean pool rows x_r drawn by seed.
double strip_entropy(const ModelParams& m, const Eigen::VectorXd& x,
                     const Eigen::MatrixXd& clean_pool, const StripConfig& cfg,
                     std::uint64_t seed);

// Per-group fraction of samples with entropy strictly below each
// threshold; thresholds must be sorted ascending.
std::map<std::string, std::vector<double>> strip_sweep(
    const ModelParams& m, const std::map<std::string, Eigen::MatrixXd>& groups,
    const Eigen::MatrixXd& clean_pool, const StripConfig& cfg, std::uint64_t seed);

// elmf over the log's cumulative eliminated set.
std::optional<double> elmf(const EliminationLog& log,
                           const std::vector<std::int64_t>& group_members);

// CSV rows (check_epoch, id, group, provenance).
std::string elimination_log_csv(const EliminationLog& log);
// CSV rows (threshold, group, detection_rate).
std::string strip_curves_csv(const std::vector<double>& thresholds,
                             const std::map<std::string, std::vector<double>>& curves);

}  // namespace tension

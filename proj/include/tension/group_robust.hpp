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
// Group-robust training without group annotations: upweight-misclassified
// (two-phase identification + amplification), latent clustering into
// pseudo-groups, and online group DRO. Interventions force poison ids out
// of or into the amplified set to isolate their effect.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

enum class Intervention { Standard, Ideal, Worst };

struct JTTConfig {
  int early_stop_epochs = 25;   // identification epochs; overrides identification.epochs
  int upsampling_factor = 100;  // lambda
  TrainConfig identification;
  TrainConfig final_phase;
};

struct AmplificationSet {
  std::set<std::int64_t> ids;
  int multiplicity = 1;  // uniform per-id weight

  std::map<std::int64_t, int> as_weights() const;  // ids -> multiplicity
};

// Per-class latent clustering; cluster indices are global and class-major.
struct PseudoGroups {
  std::map<std::int64_t, int> cluster_of;        // every train id assigned once
  std::map<int, int> clusters_per_class;         // chosen k per class
  std::map<int, int> class_of_cluster;
  int n_clusters = 0;

  std::vector<std::int64_t> members(int cluster) const;
  // Smallest cluster of a class; ties resolved to the lower cluster index.
  int smallest_cluster_of_class(int class_label) const;
};

struct DROState {
  Eigen::VectorXd q;      // group weights, simplex
  double step_size = 0.01;

  static DROState uniform(int n_groups, double step_size);
};

struct GeorgeConfig {
  TrainConfig erm;
  TrainConfig dro;
  int max_clusters = 10;
  double dro_step_size = 0.05;
  std::uint64_t cluster_seed = 0;
};

// Trains the heavily regularized identification model for exactly
// `early_stop_epochs` epochs and returns the train-set ids it
// misclassifies, each carrying the upsampling multiplicity. `initial`
// overrides the seeded random init (used to probe untrained behavior).
AmplificationSet jtt_identify(const Dataset& ds, const JTTConfig& cfg,
                              const std::optional<ModelParams>& initial = std::nullopt);

struct JTTResult {
  ModelParams params;
  AmplificationSet used;        // after the intervention
  AmplificationSet identified;  // raw identification output
  TrainLog log;
};

// Identification, intervention on the amplification set (Ideal removes all
// poison ids, Worst inserts them), then final training on the replicated
// dataset with best-validation-WGA selection. `excluded` ids (potential
// poisons handed over by a defense) are dropped from the amplified set
// after the intervention.
JTTResult jtt_train(const Dataset& train, const Dataset& val, const JTTConfig& cfg,
                    Intervention intervention,
                    const std::set<std::int64_t>* excluded = nullptr);

// Per class: k-means over latent vectors for k in [2, max_clusters], k
// chosen by mean silhouette (degenerate latents fall back to one cluster).
PseudoGroups george_cluster(const Dataset& ds, const ModelParams& erm_model,
                            int max_clusters, std::uint64_t seed);

// q_g <- q_g * exp(step * loss_g), renormalized. Returns per-group
// per-sample weights q_g / group_size_g aligned with the loss vector.
Eigen::VectorXd group_dro_step(DROState& state, const Eigen::VectorXd& per_group_losses,
                               const Eigen::VectorXd& group_sizes);

struct GeorgeResult {
  ModelParams params;
  PseudoGroups pseudo_groups;    // after the intervention
  std::set<std::int64_t> amplified;  // members of each class's smallest cluster
  TrainLog log;
};

// Phase 1: ERM + latent clustering. Phase 2: group DRO over the
// pseudo-groups. Interventions move poison ids out of (Ideal) or into
// (Worst) the smallest cluster of their class before phase 2.
GeorgeResult george_train(const Dataset& train, const Dataset& val,
                          const GeorgeConfig& cfg, Intervention intervention);

nlohmann::ordered_json amplification_to_json(const AmplificationSet& set);
nlohmann::ordered_json pseudo_groups_to_json(const PseudoGroups& groups);

// Test hook: plain k-means used by george_cluster (farthest-point start,
// ties to the lowest point index).
std::vector<int> kmeans_assign(const Eigen::MatrixXd& points, int k, int iterations,
                               std::uint64_t seed);
double mean_silhouette(const Eigen::MatrixXd& points, const std::vector<int>& assign,
                       int k);

}  // namespace tension

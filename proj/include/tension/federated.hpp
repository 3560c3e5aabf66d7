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
// Federated training simulator: clients train locally and ship parameter
// deltas, the server combines them with a plain weighted average or a
// robust aggregator (coordinate median, trimmed mean, top-k
// sparsification with momentum and error feedback).
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "tension/attacks.hpp"
#include "tension/metrics.hpp"
#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

enum class AggregatorType { FedAvg, Median, TrimmedMean, SparseFed };

std::string aggregator_name(AggregatorType type);
AggregatorType aggregator_from_name(const std::string& name);

struct AggregatorKind {
  AggregatorType type = AggregatorType::FedAvg;
  int trim_k = 2;                 // TrimmedMean
  double keep_fraction = 0.05;    // SparseFed: share of parameters kept
  std::optional<int> keep_k;      // SparseFed: absolute override
  double momentum_rho = 0.9;      // SparseFed
};

struct FLConfig {
  int n_clients = 100;
  double participation = 0.1;
  int rounds = 30;
  int local_epochs = 10;
  TrainConfig local;              // local.epochs is overridden by local_epochs
  AggregatorKind aggregator;
  PartitionMode partition = PartitionMode::NonIid;
  double minority_holder_fraction = 0.1;

  void validate() const;
  int participants() const;
};

struct ClientUpdate {
  Eigen::VectorXd delta;
  int client_id = 0;
  std::size_t n_samples = 0;
};

struct SparseFedState {
  Eigen::VectorXd momentum;
  Eigen::VectorXd residual;

  static SparseFedState zeros(Eigen::Index n);
};

// Per-coordinate median; mean of the two middle values on even counts.
Eigen::VectorXd aggregate_median(const std::vector<ClientUpdate>& updates);

// Per-coordinate mean after dropping the k smallest and k largest values.
Eigen::VectorXd aggregate_trimmed_mean(const std::vector<ClientUpdate>& updates, int k);

// v <- rho * momentum + mean(updates) + residual; emit the top keep_k
// coordinates of v by magnitude (ties to the lowest index); residual
// <- v - emitted; momentum <- v.
Eigen::VectorXd aggregate_sparsefed(const std::vector<ClientUpdate>& updates,
                                    int keep_k, double rho, SparseFedState& state);

// Sample-count-weighted mean of deltas.
Eigen::VectorXd aggregate_fedavg(const std::vector<ClientUpdate>& updates);

// Seeded sampling without replacement of the round's participants.
std::vector<int> select_clients(int n_clients, int participants, int round,
                                std::uint64_t seed);

// Clients train locally from the global parameters, the aggregator merges
// their deltas, and the result is applied with server step 1.
ModelParams run_round(const ModelParams& global,
                      const std::vector<const Dataset*>& selected_clients,
                      const std::vector<int>& selected_ids, const FLConfig& cfg,
                      SparseFedState& state, int round, std::uint64_t seed);

struct FLRoundLog {
  int round = 0;
  double wga = 0.0;
  double acc = 0.0;
  double asr = 0.0;  // NaN when no attack is configured
};

struct FLRunResult {
  ModelParams params;
  std::vector<FLRoundLog> rounds;
};

// Full federated run over a fixed client partition.
FLRunResult run_fl(const std::vector<Dataset>& clients, const FLConfig& cfg, int dim,
                   int n_classes, const Dataset* test, const AttackSpec* attack,
                   std::uint64_t seed);

struct FLExperimentResult {
  double wga_drop = 0.0;  // FedAvg baseline minus defended
  double acc_drop = 0.0;
  double baseline_wga = 0.0, baseline_acc = 0.0;
  double defended_wga = 0.0, defended_acc = 0.0;
  FLRunResult baseline, defended;
};

// Shares partition and seeds between the FedAvg baseline and the defended
// run so the drops isolate the aggregator.
FLExperimentResult run_fl_experiment(const Dataset& train, const Dataset& test,
                                     const FLConfig& cfg, const AttackSpec* attack,
                                     std::uint64_t seed);

// CSV rows (round, aggregator, wga, acc, asr).
std::string round_log_csv(const std::vector<FLRoundLog>& rounds,
                          AggregatorType aggregator);

}  // namespace tension

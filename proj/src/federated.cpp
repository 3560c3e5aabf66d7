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
#include "tension/federated.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace tension {

std::string aggregator_name(AggregatorType type) {
  switch (type) {
    case AggregatorType::FedAvg: return "fedavg";
    case AggregatorType::Median: return "median";
    case AggregatorType::TrimmedMean: return "trimmed_mean";
    case AggregatorType::SparseFed: return "sparsefed";
  }
  return "fedavg";
}

AggregatorType aggregator_from_name(const std::string& name) {
  if (name == "fedavg") return AggregatorType::FedAvg;
  if (name == "median") return AggregatorType::Median;
  if (name == "trimmed_mean") return AggregatorType::TrimmedMean;
  if (name == "sparsefed") return AggregatorType::SparseFed;
  throw ConfigError("unknown aggregator: " + name);
}

void FLConfig::validate() const {
  if (n_clients < 1) throw ConfigError("FLConfig: need at least one client");
  if (participation <= 0.0 || participation > 1.0)
    throw ConfigError("FLConfig: participation outside (0,1]");
  if (rounds < 0) throw ConfigError("FLConfig: negative round count");
  if (local_epochs < 1) throw ConfigError("FLConfig: local epochs must be >= 1");
  if (participants() < 1) throw ConfigError("FLConfig: no participants per round");
  if (aggregator.type == AggregatorType::TrimmedMean &&
      2 * aggregator.trim_k >= participants())
    throw ConfigError("FLConfig: trimmed mean needs 2k < participants");
}

int FLConfig::participants() const {
  return static_cast<int>(
      std::ceil(participation * static_cast<double>(n_clients)));
}

SparseFedState SparseFedState::zeros(Eigen::Index n) {
  SparseFedState s;
  s.momentum = Eigen::VectorXd::Zero(n);
  s.residual = Eigen::VectorXd::Zero(n);
  return s;
}

namespace {

void check_updates(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw DomainError("aggregate: no updates");
  for (const auto& u : updates) {
    if (u.delta.size() != updates.front().delta.size())
      throw DomainError("aggregate: update length mismatch");
    if (!u.delta.allFinite()) throw DomainError("aggregate: non-finite update");
  }
}

Eigen::VectorXd plain_mean(const std::vector<ClientUpdate>& updates) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(updates.front().delta.size());
  for (const auto& u : updates) sum += u.delta;
  return sum / static_cast<double>(updates.size());
}

}  // namespace

Eigen::VectorXd aggregate_fedavg(const std::vector<ClientUpdate>& updates) {
  check_updates(updates);
  double total = 0.0;
  for (const auto& u : updates) total += static_cast<double>(u.n_samples);
  if (total <= 0.0) return plain_mean(updates);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(updates.front().delta.size());
  for (const auto& u : updates)
    sum += (static_cast<double>(u.n_samples) / total) * u.delta;
  return sum;
}

Eigen::VectorXd aggregate_median(const std::vector<ClientUpdate>& updates) {
  check_updates(updates);
  const std::size_t n = updates.size();
  Eigen::VectorXd out(updates.front().delta.size());
  std::vector<double> column(n);
  for (Eigen::Index c = 0; c < out.size(); ++c) {
    for (std::size_t i = 0; i < n; ++i) column[i] = updates[i].delta(c);
    std::sort(column.begin(), column.end());
    out(c) = n % 2 == 1 ? column[n / 2]
                        : 0.5 * (column[n / 2 - 1] + column[n / 2]);
  }
  return out;
}

Eigen::VectorXd aggregate_trimmed_mean(const std::vector<ClientUpdate>& updates, int k) {
  check_updates(updates);
  if (k < 0) throw ConfigError("aggregate_trimmed_mean: negative k");
  const std::size_t n = updates.size();
  if (2 * static_cast<std::size_t>(k) >= n)
    throw ConfigError("aggregate_trimmed_mean: 2k must be < update count");
  Eigen::VectorXd out(updates.front().delta.size());
  std::vector<double> column(n);
  for (Eigen::Index c = 0; c < out.size(); ++c) {
    for (std::size_t i = 0; i < n; ++i) column[i] = updates[i].delta(c);
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (std::size_t i = k; i < n - k; ++i) sum += column[i];
    out(c) = sum / static_cast<double>(n - 2 * k);
  }
  return out;
}

Eigen::VectorXd aggregate_sparsefed(const std::vector<ClientUpdate>& updates,
                                    int keep_k, double rho, SparseFedState& state) {
  check_updates(updates);
  const Eigen::Index dim = updates.front().delta.size();
  if (keep_k < 1 || keep_k > dim)
    throw ConfigError("aggregate_sparsefed: keep_k outside [1, dim]");
  if (state.momentum.size() != dim || state.residual.size() != dim)
    throw DomainError("aggregate_sparsefed: state size mismatch");

  const Eigen::VectorXd v = rho * state.momentum + plain_mean(updates) + state.residual;

  std::vector<Eigen::Index> order(dim);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return std::abs(v(a)) > std::abs(v(b));
  });

  Eigen::VectorXd emitted = Eigen::VectorXd::Zero(dim);
  for (int i = 0; i < keep_k; ++i) emitted(order[i]) = v(order[i]);
  state.residual = v - emitted;
  state.momentum = v;
  return emitted;
}

std::vector<int> select_clients(int n_clients, int participants, int round,
                                std::uint64_t seed) {
  if (participants < 1 || participants > n_clients)
    throw ConfigError("select_clients: participants outside [1, n_clients]");
  std::vector<int> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  auto rng = make_rng(seed, 500 + static_cast<std::uint64_t>(round));
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(participants);
  std::sort(ids.begin(), ids.end());
  return ids;
}

ModelParams run_round(const ModelParams& global,
                      const std::vector<const Dataset*>& selected_clients,
                      const std::vector<int>& selected_ids, const FLConfig& cfg,
                      SparseFedState& state, int round, std::uint64_t seed) {
  if (selected_clients.empty()) throw DomainError("run_round: no clients selected");

  TrainConfig local = cfg.local;
  local.epochs = cfg.local_epochs;

  std::vector<ClientUpdate> updates;
  updates.reserve(selected_clients.size());
  for (std::size_t i = 0; i < selected_clients.size(); ++i) {
    const Dataset* client = selected_clients[i];
    if (client->empty()) continue;
    local.seed = mix_seed(seed, (static_cast<std::uint64_t>(round) << 20) ^
                                    static_cast<std::uint64_t>(selected_ids[i]));
    const ModelParams trained = train(global, *client, local).params;
    updates.push_back({trained.values - global.values, selected_ids[i],
                       client->size()});
  }
  if (updates.empty()) throw DomainError("run_round: all selected clients empty");

  Eigen::VectorXd delta;
  switch (cfg.aggregator.type) {
    case AggregatorType::FedAvg:
      delta = aggregate_fedavg(updates);
      break;
    case AggregatorType::Median:
      delta = aggregate_median(updates);
      break;
    case AggregatorType::TrimmedMean:
      delta = aggregate_trimmed_mean(updates, cfg.aggregator.trim_k);
      break;
    case AggregatorType::SparseFed: {
      const int keep = cfg.aggregator.keep_k
                           ? *cfg.aggregator.keep_k
                           : std::max<int>(1, static_cast<int>(std::floor(
                                                  cfg.aggregator.keep_fraction *
                                                  static_cast<double>(
                                                      global.values.size()))));
      delta = aggregate_sparsefed(updates, keep, cfg.aggregator.momentum_rho, state);
      break;
    }
  }
  ModelParams next = global;
  next.values += delta;
  return next;
}

FLRunResult run_fl(const std::vector<Dataset>& clients, const FLConfig& cfg, int dim,
                   int n_classes, const Dataset* test, const AttackSpec* attack,
                   std::uint64_t seed) {
  cfg.validate();
  FLRunResult res;
  res.params = ModelParams::random_init(dim, 32, n_classes, mix_seed(seed, 41));
  SparseFedState state = SparseFedState::zeros(res.params.size());

  for (int round = 0; round < cfg.rounds; ++round) {
    const std::vector<int> ids =
        select_clients(cfg.n_clients, cfg.participants(), round, seed);
    std::vector<const Dataset*> selected;
    selected.reserve(ids.size());
    for (int id : ids) selected.push_back(&clients[static_cast<std::size_t>(id)]);
    res.params = run_round(res.params, selected, ids, cfg, state, round, seed);

    if (test) {
      FLRoundLog log;
      log.round = round;
      const EvalResult eval = evaluate(res.params, *test);
      log.acc = eval.overall_accuracy;
      log.wga = wga(eval);
      log.asr = std::numeric_limits<double>::quiet_NaN();
      if (attack && attack->kind == AttackKind::Dlbd) {
        const auto asr =
            asr_dlbd(res.params, *test, attack->trigger, attack->target_class);
        if (asr) log.asr = *asr;
      }
      res.rounds.push_back(log);
    }
  }
  return res;
}

FLExperimentResult run_fl_experiment(const Dataset& train, const Dataset& test,
                                     const FLConfig& cfg, const AttackSpec* attack,
                                     std::uint64_t seed) {
  const std::vector<Dataset> clients =
      partition_clients(train, static_cast<std::size_t>(cfg.n_clients), cfg.partition,
                        cfg.minority_holder_fraction, mix_seed(seed, 43));

  FLConfig baseline_cfg = cfg;
  baseline_cfg.aggregator = AggregatorKind{};  // FedAvg

  FLExperimentResult res;
  res.baseline =
      run_fl(clients, baseline_cfg, train.dim, train.n_classes, &test, attack, seed);
  res.defended = run_fl(clients, cfg, train.dim, train.n_classes, &test, attack, seed);

  const EvalResult base_eval = evaluate(res.baseline.params, test);
  const EvalResult def_eval = evaluate(res.defended.params, test);
  res.baseline_wga = wga(base_eval);
  res.baseline_acc = base_eval.overall_accuracy;
  res.defended_wga = wga(def_eval);
  res.defended_acc = def_eval.overall_accuracy;
  res.wga_drop = res.baseline_wga - res.defended_wga;
  res.acc_drop = res.baseline_acc - res.defended_acc;
  return res;
}

std::string round_log_csv(const std::vector<FLRoundLog>& rounds,
                          AggregatorType aggregator) {
  std::ostringstream out;
  out << "round,aggregator,wga,acc,asr\n";
  for (const auto& r : rounds) {
    out << r.round << ',' << aggregator_name(aggregator) << ',' << r.wga << ','
        << r.acc << ',';
    if (std::isnan(r.asr))
      out << "";
    else
      out << r.asr;
    out << '\n';
  }
  return out.str();
}

}  // namespace tension

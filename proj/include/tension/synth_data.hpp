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
// Synthetic group-structured datasets: every sample belongs to a
// (class, spurious attribute) group, group sizes follow configurable
// proportions, and a share of the nominal size can be reserved for
// poison samples appended later by an attack.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tension/common.hpp"

namespace tension {

// (class, attribute) pair indexing one subpopulation.
struct GroupLabel {
  int class_label = 0;
  int attribute = 0;
  auto operator<=>(const GroupLabel&) const = default;
};

std::string group_name(const GroupLabel& g);  // "g{class}_{attribute}"

enum class AttackKind { None, Dlbd, Sa, Gm };

std::string attack_kind_name(AttackKind k);
AttackKind attack_kind_from_name(const std::string& name);

// One data point. Poison samples keep their base group and carry the
// assigned (possibly flipped) label separately; `base_id` identifies the
// clean sample a poison was derived from (-1 for clean samples).
struct Sample {
  Eigen::VectorXd features;
  GroupLabel group;
  int label = 0;
  AttackKind provenance = AttackKind::None;
  std::int64_t id = 0;
  std::int64_t base_id = -1;
};

// Generative description of the group structure. Features are drawn as
// class_mean(y) + attribute_mean(a) + noise_scale * N(0, I).
struct GroupSpec {
  int dim = 20;
  int n_classes = 2;
  int n_attributes = 2;
  std::vector<double> proportions;   // index = class * n_attributes + attribute
  double poison_fraction = 0.0;      // share of n reserved for poisons
  Eigen::MatrixXd class_means;       // n_classes x dim
  Eigen::MatrixXd attribute_means;   // n_attributes x dim
  double noise_scale = 1.0;

  // Two classes x two attributes, class signal +-class_margin on axis 0,
  // spurious signal +-spurious_margin on axis 1.
  static GroupSpec make_default(int dim = 20, double class_margin = 2.0,
                                double spurious_margin = 3.0,
                                double noise_scale = 1.0);

  int n_groups() const { return n_classes * n_attributes; }
  void validate() const;  // throws ConfigError
};

// Column-oriented sample store; one row of `features` per sample.
struct Dataset {
  int dim = 0;
  int n_classes = 2;
  int n_attributes = 2;
  Eigen::MatrixXd features;
  std::vector<GroupLabel> groups;
  std::vector<int> labels;
  std::vector<AttackKind> provenance;
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> base_ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool is_poison(std::size_t i) const { return provenance[i] != AttackKind::None; }

  Sample sample(std::size_t i) const;
  void append(const Sample& s);
  void reserve(std::size_t n);
  std::int64_t next_id() const;

  std::vector<std::int64_t> poison_ids() const;
  std::vector<std::int64_t> member_ids(const GroupLabel& g) const;  // clean only

  // Dirty-label poisons must carry a label different from their base
  // group's class; ids must be unique. Throws DomainError on violation.
  void validate() const;
};

struct GroupCounts {
  std::map<GroupLabel, std::size_t> clean;
  std::size_t poisons = 0;
  std::size_t clean_total() const;
};

// Draws round(proportion * n) samples per group (remainder adjusted on the
// largest group) and leaves round(poison_fraction * n) slots unfilled so an
// attack can later bring the set back to nominal size n.
Dataset generate_dataset(const GroupSpec& spec, std::size_t n, std::uint64_t seed);

GroupCounts group_counts(const Dataset& ds);

// Groups whose clean count is below factor * (clean total / number of groups).
std::set<GroupLabel> minority_groups(const Dataset& ds, double factor = 0.5);

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

// Stratified split preserving per-group proportions; poison samples are
// all routed to the train partition.
std::array<Dataset, 3> split(const Dataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed);

enum class PartitionMode { Iid, NonIid };

// IID: equal-size random shards. NonIID: minority-group samples (and
// poisons) live only on ceil(minority_holder_fraction * n_clients) clients.
std::vector<Dataset> partition_clients(const Dataset& ds, std::size_t n_clients,
                                       PartitionMode mode,
                                       double minority_holder_fraction,
                                       std::uint64_t seed,
                                       double minority_factor = 0.5);

// JSON document {d, C, A, samples:[{id, x, y, a, label, provenance}]}.
nlohmann::ordered_json dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const nlohmann::json& j);

}  // namespace tension

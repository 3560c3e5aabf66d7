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
// Training-set poisoning: dirty-label backdoor (trigger + wrong label),
// subpopulation attack (label-flipped duplicates), and gradient matching
// (clean-label perturbations aligning the poison gradient with an
// adversarial target gradient).
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tension/model.hpp"
#include "tension/synth_data.hpp"

namespace tension {

// Fixed values written onto fixed feature coordinates.
struct TriggerPattern {
  std::vector<int> coordinates;
  std::vector<double> values;

  // Last two coordinates set to +4 (about 4 noise sigmas in the default data).
  static TriggerPattern make_default(int dim, double magnitude = 4.0);
  void validate(int dim) const;
};

struct GMConfig {
  double epsilon = 0.5;    // max-norm radius, raw feature units
  int restarts = 8;
  int steps = 40;
  double step_size = 0.05;
  int n_targets = 5;
};

struct AttackSpec {
  AttackKind kind = AttackKind::Dlbd;
  double poison_fraction = 0.01;
  GroupLabel base_group{0, 0};
  int target_class = 1;  // assigned label for DLBD/SA poisons
  TriggerPattern trigger;
  GMConfig gm;
};

struct AttackResult {
  Dataset poisoned;
  std::vector<std::int64_t> poison_ids;
  double alignment_loss = 0.0;  // GM only
};

Eigen::VectorXd apply_trigger(const Eigen::VectorXd& x, const TriggerPattern& trigger);

// Copies ceil(fraction * n) base-group samples, writes the trigger, assigns
// target_class as the (wrong) label, appends with Poison provenance.
AttackResult craft_dlbd(const Dataset& ds, const AttackSpec& spec, std::uint64_t seed);

// Duplicates ceil(fraction * n) base-group samples verbatim with flipped
// labels (FeatureMatch + label flipping).
AttackResult craft_sa(const Dataset& ds, const AttackSpec& spec, std::uint64_t seed);

// Perturbs base-group samples within the epsilon max-norm ball by signed
// projected gradient descent on 1 - cos(target gradient, mean poison
// gradient); labels stay clean. `targets` carry their true labels;
// adversarial_class is the label the attacker wants them pushed into.
AttackResult craft_gm(const Dataset& ds, const AttackSpec& spec,
                      const ModelParams& crafting_model,
                      const std::vector<Sample>& targets, int adversarial_class,
                      std::uint64_t seed);

// Alignment loss 1 - cos(g_target, mean poison gradient) for the given
// poison features; exposed for audits and tests.
double gm_alignment_loss(const ModelParams& m, const Eigen::VectorXd& target_grad,
                         const Eigen::MatrixXd& poison_x,
                         const std::vector<int>& poison_labels);

namespace detail {
// d/dx of <per-sample parameter gradient at (x, y), u>, relu mask held
// fixed; the inner derivative of the alignment objective.
Eigen::VectorXd grad_inner_product_wrt_input(const ModelParams& m,
                                             const Eigen::VectorXd& x, int label,
                                             const Eigen::VectorXd& u);
}  // namespace detail

// [{id, base_id, kind}] for every poison in the dataset.
nlohmann::ordered_json poison_manifest(const Dataset& ds);

}  // namespace tension

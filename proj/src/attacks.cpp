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
#include "tension/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace tension {

TriggerPattern TriggerPattern::make_default(int dim, double magnitude) {
  if (dim < 2) throw ConfigError("TriggerPattern: need at least 2 feature dims");
  TriggerPattern t;
  t.coordinates = {dim - 2, dim - 1};
  t.values = {magnitude, magnitude};
  return t;
}

void TriggerPattern::validate(int dim) const {
  if (coordinates.size() != values.size())
    throw ConfigError("TriggerPattern: coordinate/value length mismatch");
  std::set<int> seen;
  for (int c : coordinates) {
    if (c < 0 || c >= dim) throw ConfigError("TriggerPattern: coordinate out of range");
    if (!seen.insert(c).second) throw ConfigError("TriggerPattern: duplicate coordinate");
  }
}

Eigen::VectorXd apply_trigger(const Eigen::VectorXd& x, const TriggerPattern& trigger) {
  Eigen::VectorXd out = x;
  for (std::size_t i = 0; i < trigger.coordinates.size(); ++i)
    out(trigger.coordinates[i]) = trigger.values[i];
  return out;
}

namespace {

std::size_t poison_count(const Dataset& ds, double fraction) {
  if (fraction < 0.0 || fraction >= 1.0)
    throw ConfigError("attack: poison fraction outside [0,1)");
  return static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(ds.size())));
}

// Uniform choice without replacement among clean base-group rows.
std::vector<std::size_t> pick_base_rows(const Dataset& ds, const GroupLabel& base,
                                        std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (!ds.is_poison(i) && ds.groups[i] == base) rows.push_back(i);
  if (rows.size() < count)
    throw DomainError("attack: base group smaller than poison count");
  auto rng = make_rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(count);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

AttackResult craft_dlbd(const Dataset& ds, const AttackSpec& spec, std::uint64_t seed) {
  spec.trigger.validate(ds.dim);
  if (spec.target_class == spec.base_group.class_label)
    throw ConfigError("craft_dlbd: target class equals base class (not dirty-label)");
  const std::size_t count = poison_count(ds, spec.poison_fraction);

  AttackResult res;
  res.poisoned = ds;
  if (count == 0) return res;

  const auto rows = pick_base_rows(ds, spec.base_group, count, seed);
  std::int64_t id = ds.next_id();
  for (std::size_t r : rows) {
    Sample s = ds.sample(r);
    s.features = apply_trigger(s.features, spec.trigger);
    s.label = spec.target_class;
    s.provenance = AttackKind::Dlbd;
    s.base_id = s.id;
    s.id = id++;
    res.poisoned.append(s);
    res.poison_ids.push_back(s.id);
  }
  return res;
}

AttackResult craft_sa(const Dataset& ds, const AttackSpec& spec, std::uint64_t seed) {
  if (spec.target_class == spec.base_group.class_label)
    throw ConfigError("craft_sa: flipped label equals base class");
  const std::size_t count = poison_count(ds, spec.poison_fraction);

  AttackResult res;
  res.poisoned = ds;
  if (count == 0) return res;

  const auto rows = pick_base_rows(ds, spec.base_group, count, seed);
  std::int64_t id = ds.next_id();
  for (std::size_t r : rows) {
    Sample s = ds.sample(r);  // features bit-identical to the base sample
    s.label = spec.target_class;
    s.provenance = AttackKind::Sa;
    s.base_id = s.id;
    s.id = id++;
    res.poisoned.append(s);
    res.poison_ids.push_back(s.id);
  }
  return res;
}

double gm_alignment_loss(const ModelParams& m, const Eigen::VectorXd& target_grad,
                         const Eigen::MatrixXd& poison_x,
                         const std::vector<int>& poison_labels) {
  const Eigen::VectorXd poison_grad = gradient(m, poison_x, poison_labels, 0.0);
  const double denom = target_grad.norm() * poison_grad.norm();
  if (denom < 1e-30) return 1.0;
  return 1.0 - target_grad.dot(poison_grad) / denom;
}

namespace detail {

Eigen::VectorXd grad_inner_product_wrt_input(const ModelParams& m,
                                             const Eigen::VectorXd& x, int label,
                                             const Eigen::VectorXd& u) {
  const Eigen::Index n_w1 = static_cast<Eigen::Index>(m.dim) * m.hidden;
  const Eigen::Index n_w2 = static_cast<Eigen::Index>(m.hidden) * m.n_classes;
  Eigen::Map<const Eigen::MatrixXd> u1(u.data(), m.dim, m.hidden);
  Eigen::Map<const Eigen::VectorXd> ub1(u.data() + n_w1, m.hidden);
  Eigen::Map<const Eigen::MatrixXd> u2(u.data() + n_w1 + m.hidden, m.hidden, m.n_classes);
  Eigen::Map<const Eigen::VectorXd> ub2(u.data() + n_w1 + m.hidden + n_w2, m.n_classes);

  const Eigen::VectorXd pre = m.w1().transpose() * x + m.b1();
  const Eigen::VectorXd mask = (pre.array() > 0.0).cast<double>();
  const Eigen::VectorXd latent = pre.cwiseMax(0.0);
  Eigen::VectorXd logits = m.w2().transpose() * latent + m.b2();
  logits.array() -= logits.maxCoeff();
  Eigen::VectorXd probs = logits.array().exp();
  probs /= probs.sum();
  Eigen::VectorXd err = probs;
  err(label) -= 1.0;

  // Sensitivities of latent, error and the hidden backprop signal to x.
  // m_a = d latent / dx, m_e = d err / dx, m_r = d (mask .* (W2 err)) / dx.
  const Eigen::MatrixXd m_a = mask.asDiagonal() * m.w1().transpose();      // h x d
  const Eigen::MatrixXd smat =
      Eigen::MatrixXd(probs.asDiagonal()) - probs * probs.transpose();     // C x C
  const Eigen::MatrixXd m_e = smat * m.w2().transpose() * m_a;             // C x d
  const Eigen::MatrixXd m_r = mask.asDiagonal() * m.w2() * m_e;            // h x d

  Eigen::VectorXd out = m_a.transpose() * (u2 * err);
  out += m_e.transpose() * (u2.transpose() * latent + ub2);
  const Eigen::VectorXd back = (m.w2() * err).cwiseProduct(mask);
  out += u1 * back;
  out += m_r.transpose() * (u1.transpose() * x + ub1);
  return out;
}

}  // namespace detail

AttackResult craft_gm(const Dataset& ds, const AttackSpec& spec,
                      const ModelParams& crafting_model,
                      const std::vector<Sample>& targets, int adversarial_class,
                      std::uint64_t seed) {
  const GMConfig& gm = spec.gm;
  if (gm.epsilon <= 0.0) throw ConfigError("craft_gm: epsilon must be > 0");
  if (gm.restarts < 1) throw ConfigError("craft_gm: need at least one restart");
  if (targets.empty()) throw DomainError("craft_gm: no targets");
  for (const auto& t : targets)
    if (t.label == adversarial_class)
      throw DomainError("craft_gm: target already labeled as the adversarial class");

  const std::size_t count = poison_count(ds, spec.poison_fraction);
  AttackResult res;
  res.poisoned = ds;
  if (count == 0) return res;

  // Adversarially labeled target gradient; fixed across the whole attack.
  Eigen::MatrixXd target_x(targets.size(), ds.dim);
  std::vector<int> adv_labels(targets.size(), adversarial_class);
  for (std::size_t i = 0; i < targets.size(); ++i) target_x.row(i) = targets[i].features;
  const Eigen::VectorXd target_grad =
      gradient(crafting_model, target_x, adv_labels, 0.0);

  const auto rows = pick_base_rows(ds, spec.base_group, count, seed);
  Eigen::MatrixXd base_x(count, ds.dim);
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) {
    base_x.row(i) = ds.features.row(rows[i]);
    labels[i] = ds.labels[rows[i]];  // clean-label: true labels kept
  }

  auto rng = make_rng(seed, 1);
  std::uniform_real_distribution<double> init(-gm.epsilon, gm.epsilon);

  Eigen::MatrixXd best_delta = Eigen::MatrixXd::Zero(count, ds.dim);
  double best_loss = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < gm.restarts; ++restart) {
    Eigen::MatrixXd delta(count, ds.dim);
    for (Eigen::Index i = 0; i < delta.rows(); ++i)
      for (Eigen::Index j = 0; j < delta.cols(); ++j) delta(i, j) = init(rng);

    Eigen::MatrixXd restart_best = delta;
    double restart_loss =
        gm_alignment_loss(crafting_model, target_grad, base_x + delta, labels);

    for (int step = 0; step < gm.steps; ++step) {
      const Eigen::MatrixXd poisons = base_x + delta;
      const Eigen::VectorXd poison_grad = gradient(crafting_model, poisons, labels, 0.0);
      const double pn = poison_grad.norm();
      const double tn = target_grad.norm();
      if (pn < 1e-30 || tn < 1e-30) break;
      const double dot = target_grad.dot(poison_grad);
      // d alignment / d poison_grad
      const Eigen::VectorXd u =
          -(target_grad / (tn * pn)) + (dot / (tn * pn * pn * pn)) * poison_grad;

      for (std::size_t i = 0; i < count; ++i) {
        const Eigen::VectorXd gx = detail::grad_inner_product_wrt_input(
            crafting_model, poisons.row(i), labels[i], u);
        for (int j = 0; j < ds.dim; ++j) {
          const double dir = gx(j) > 0.0 ? 1.0 : (gx(j) < 0.0 ? -1.0 : 0.0);
          delta(i, j) = std::clamp(delta(i, j) - gm.step_size * dir, -gm.epsilon,
                                   gm.epsilon);
        }
      }
      const double loss =
          gm_alignment_loss(crafting_model, target_grad, base_x + delta, labels);
      if (!std::isfinite(loss)) throw RunError("craft_gm: non-finite alignment loss");
      if (loss < restart_loss) {
        restart_loss = loss;
        restart_best = delta;
      }
    }
    if (restart_loss < best_loss) {
      best_loss = restart_loss;
      best_delta = restart_best;
    }
  }
  if (!std::isfinite(best_loss)) throw RunError("craft_gm: non-finite alignment loss");
  res.alignment_loss = best_loss;

  std::int64_t id = ds.next_id();
  for (std::size_t i = 0; i < count; ++i) {
    Sample s = ds.sample(rows[i]);
    s.features = base_x.row(i).transpose() + best_delta.row(i).transpose();
    s.provenance = AttackKind::Gm;
    s.base_id = s.id;
    s.id = id++;
    res.poisoned.append(s);
    res.poison_ids.push_back(s.id);
  }
  return res;
}

nlohmann::ordered_json poison_manifest(const Dataset& ds) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!ds.is_poison(i)) continue;
    nlohmann::ordered_json row;
    row["id"] = ds.ids[i];
    row["base_id"] = ds.base_ids[i];
    row["kind"] = attack_kind_name(ds.provenance[i]);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace tension

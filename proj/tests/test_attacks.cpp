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
#include <doctest.h>

#include <set>

#include "tension/attacks.hpp"
#include "test_support.hpp"

using namespace tension;

namespace {

AttackSpec dlbd_spec(int dim, double fraction = 0.01) {
  AttackSpec spec;
  spec.kind = AttackKind::Dlbd;
  spec.poison_fraction = fraction;
  spec.base_group = {0, 0};
  spec.target_class = 1;
  spec.trigger = TriggerPattern::make_default(dim);
  return spec;
}

}  // namespace

TEST_CASE("craft_dlbd: one percent of a 5000-sample set is 50 poisons") {
  const Dataset ds = testing::make_default_train(5000, 0.01, 7);  // 4950 clean
  const AttackResult res = craft_dlbd(ds, dlbd_spec(ds.dim), 3);
  CHECK(res.poison_ids.size() == 50);
  CHECK(res.poisoned.size() == 5000);
  CHECK(group_counts(res.poisoned).poisons == 50);
}

TEST_CASE("craft_dlbd: zero fraction leaves the dataset unchanged") {
  const Dataset ds = testing::make_default_train(1000, 0.0, 7);
  const AttackResult res = craft_dlbd(ds, dlbd_spec(ds.dim, 0.0), 3);
  CHECK(res.poison_ids.empty());
  CHECK(res.poisoned.size() == ds.size());
  CHECK(res.poisoned.features == ds.features);
}

TEST_CASE("craft_dlbd: poisons carry the trigger and a wrong label") {
  const Dataset ds = testing::make_default_train(2000, 0.01, 7);
  const AttackSpec spec = dlbd_spec(ds.dim);
  const AttackResult res = craft_dlbd(ds, spec, 3);
  const std::set<std::int64_t> poison_set(res.poison_ids.begin(), res.poison_ids.end());
  for (std::size_t i = 0; i < res.poisoned.size(); ++i) {
    if (!poison_set.count(res.poisoned.ids[i])) continue;
    CHECK(res.poisoned.labels[i] == 1);
    CHECK(res.poisoned.labels[i] != res.poisoned.groups[i].class_label);
    CHECK(res.poisoned.provenance[i] == AttackKind::Dlbd);
    for (std::size_t t = 0; t < spec.trigger.coordinates.size(); ++t)
      CHECK(res.poisoned.features(i, spec.trigger.coordinates[t]) ==
            spec.trigger.values[t]);
  }
  res.poisoned.validate();
}

TEST_CASE("craft_dlbd: base group too small rejected") {
  const Dataset ds = testing::make_counted({{{0, 0}, 3}, {{1, 1}, 300}});
  AttackSpec spec = dlbd_spec(ds.dim);
  spec.poison_fraction = 0.05;  // needs 16 of the 3 available
  CHECK_THROWS_AS(craft_dlbd(ds, spec, 3), DomainError);
}

TEST_CASE("attacks never modify clean rows") {
  const Dataset ds = testing::make_default_train(1000, 0.01, 9);
  for (AttackKind kind : {AttackKind::Dlbd, AttackKind::Sa}) {
    AttackSpec spec = dlbd_spec(ds.dim);
    spec.kind = kind;
    const AttackResult res =
        kind == AttackKind::Dlbd ? craft_dlbd(ds, spec, 3) : craft_sa(ds, spec, 3);
    CHECK(res.poisoned.features.topRows(ds.features.rows()) == ds.features);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(res.poisoned.labels[i] == ds.labels[i]);
      CHECK(res.poisoned.provenance[i] == AttackKind::None);
    }
  }
}

TEST_CASE("apply_trigger: idempotent, local, empty-safe") {
  TriggerPattern trigger;
  trigger.coordinates = {1, 3};
  trigger.values = {4.0, -2.0};
  Eigen::VectorXd x(5);
  x << 1, 2, 3, 4, 5;
  const Eigen::VectorXd once = apply_trigger(x, trigger);
  CHECK(apply_trigger(once, trigger) == once);
  CHECK(once(0) == 1.0);
  CHECK(once(2) == 3.0);
  CHECK(once(4) == 5.0);
  CHECK(once(1) == 4.0);
  CHECK(once(3) == -2.0);

  const TriggerPattern empty;
  CHECK(apply_trigger(x, empty) == x);
}

TEST_CASE("craft_sa: two percent of 5000 samples is 100 label flips") {
  const Dataset ds = testing::make_default_train(5000, 0.0, 11);  // exactly 5000
  AttackSpec spec = dlbd_spec(ds.dim, 0.02);
  spec.kind = AttackKind::Sa;
  const AttackResult res = craft_sa(ds, spec, 5);
  CHECK(res.poison_ids.size() == 100);

  const std::set<std::int64_t> poison_set(res.poison_ids.begin(), res.poison_ids.end());
  std::map<std::int64_t, std::size_t> row_of_id;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i)
    row_of_id[res.poisoned.ids[i]] = i;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i) {
    if (!poison_set.count(res.poisoned.ids[i])) continue;
    // FeatureMatch: bit-identical features to the base sample.
    const std::size_t base_row = row_of_id.at(res.poisoned.base_ids[i]);
    CHECK(res.poisoned.features.row(i) == res.poisoned.features.row(base_row));
    CHECK(res.poisoned.labels[i] == 1 - res.poisoned.groups[i].class_label);
    CHECK(res.poisoned.provenance[i] == AttackKind::Sa);
  }
}

TEST_CASE("poison count is exactly ceil(fraction * n)") {
  const Dataset ds = testing::make_default_train(997, 0.0, 13);
  for (double fraction : {0.004, 0.01, 0.0137, 0.02}) {
    AttackSpec spec = dlbd_spec(ds.dim, fraction);
    const AttackResult res = craft_dlbd(ds, spec, 3);
    CHECK(res.poison_ids.size() ==
          static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ds.size()))));
  }
}

namespace {

struct GMFixture {
  Dataset ds;
  ModelParams surrogate;
  std::vector<Sample> targets;
  AttackSpec spec;

  GMFixture() {
    ds = testing::make_default_train(800, 0.01, 17);
    TrainConfig cfg;
    cfg.epochs = 15;
    cfg.seed = 18;
    surrogate =
        train(ModelParams::random_init(ds.dim, 32, 2, 19), ds, cfg).params;
    // Targets: class-0 samples the attacker wants pushed into class 1.
    for (std::size_t i = 0; i < ds.size() && targets.size() < 5; ++i)
      if (ds.labels[i] == 0) targets.push_back(ds.sample(i));
    spec.kind = AttackKind::Gm;
    spec.poison_fraction = 0.01;
    spec.base_group = {1, 0};
    spec.target_class = 1;
    spec.gm.epsilon = 0.5;
    spec.gm.restarts = 2;
    spec.gm.steps = 10;
    spec.gm.step_size = 0.05;
  }
};

}  // namespace

TEST_CASE("craft_gm: degenerate ball keeps poisons at their base samples") {
  GMFixture fx;
  fx.spec.gm.epsilon = 1e-12;
  fx.spec.gm.steps = 3;
  const AttackResult res = craft_gm(fx.ds, fx.spec, fx.surrogate, fx.targets, 1, 23);
  const std::set<std::int64_t> poison_set(res.poison_ids.begin(), res.poison_ids.end());
  std::map<std::int64_t, std::size_t> row_of_id;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i)
    row_of_id[res.poisoned.ids[i]] = i;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i) {
    if (!poison_set.count(res.poisoned.ids[i])) continue;
    const std::size_t base_row = row_of_id.at(res.poisoned.base_ids[i]);
    CHECK((res.poisoned.features.row(i) - res.poisoned.features.row(base_row))
              .cwiseAbs()
              .maxCoeff() <= 1e-12);
    // Clean-label: the true label is kept.
    CHECK(res.poisoned.labels[i] == res.poisoned.groups[i].class_label);
  }
}

TEST_CASE("craft_gm: max-norm projection holds exhaustively") {
  GMFixture fx;
  const AttackResult res = craft_gm(fx.ds, fx.spec, fx.surrogate, fx.targets, 1, 29);
  CHECK(res.poison_ids.size() == 8);  // ceil(0.01 * 792)
  const std::set<std::int64_t> poison_set(res.poison_ids.begin(), res.poison_ids.end());
  std::map<std::int64_t, std::size_t> row_of_id;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i)
    row_of_id[res.poisoned.ids[i]] = i;
  for (std::size_t i = 0; i < res.poisoned.size(); ++i) {
    if (!poison_set.count(res.poisoned.ids[i])) continue;
    const std::size_t base_row = row_of_id.at(res.poisoned.base_ids[i]);
    CHECK((res.poisoned.features.row(i) - res.poisoned.features.row(base_row))
              .cwiseAbs()
              .maxCoeff() <= fx.spec.gm.epsilon + 1e-12);
  }
}

TEST_CASE("craft_gm: descent never ends above the starting alignment") {
  GMFixture fx;
  // steps = 0 freezes every restart at its initialization.
  AttackSpec frozen = fx.spec;
  frozen.gm.steps = 0;
  const double at_init =
      craft_gm(fx.ds, frozen, fx.surrogate, fx.targets, 1, 31).alignment_loss;
  const double optimized =
      craft_gm(fx.ds, fx.spec, fx.surrogate, fx.targets, 1, 31).alignment_loss;
  CHECK(optimized <= at_init);
  CHECK(std::isfinite(optimized));
  CHECK(optimized >= 0.0);
  CHECK(optimized <= 2.0);
}

TEST_CASE("gm inner gradient matches finite differences") {
  const ModelParams m = ModelParams::random_init(6, 5, 2, 41);
  auto rng = make_rng(42);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::VectorXd x(6);
  for (int i = 0; i < 6; ++i) x(i) = dist(rng);
  Eigen::VectorXd u(m.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) u(i) = dist(rng);

  const Eigen::VectorXd analytic = detail::grad_inner_product_wrt_input(m, x, 1, u);
  const double step = 1e-6;
  Eigen::VectorXd fd(6);
  for (int j = 0; j < 6; ++j) {
    Eigen::VectorXd hi = x, lo = x;
    hi(j) += step;
    lo(j) -= step;
    const double up = gradient(m, hi.transpose(), {1}, 0.0).dot(u);
    const double dn = gradient(m, lo.transpose(), {1}, 0.0).dot(u);
    fd(j) = (up - dn) / (2.0 * step);
  }
  CHECK((analytic - fd).cwiseAbs().maxCoeff() /
            std::max(1.0, fd.cwiseAbs().maxCoeff()) < 1e-5);
}

TEST_CASE("poison manifest lists id, base and kind") {
  const Dataset ds = testing::make_default_train(500, 0.01, 43);
  const AttackResult res = craft_dlbd(ds, dlbd_spec(ds.dim), 3);
  const auto manifest = poison_manifest(res.poisoned);
  CHECK(manifest.size() == res.poison_ids.size());
  for (const auto& row : manifest) {
    CHECK(row.at("kind") == "dlbd");
    CHECK(row.at("base_id").get<std::int64_t>() >= 0);
    CHECK(row.at("id").get<std::int64_t>() >
          row.at("base_id").get<std::int64_t>());
  }
}

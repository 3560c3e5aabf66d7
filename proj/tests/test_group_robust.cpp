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

#include <numeric>
#include <set>

#include "tension/attacks.hpp"
#include "tension/group_robust.hpp"
#include "tension/metrics.hpp"
#include "test_support.hpp"

using namespace tension;

namespace {

JTTConfig quick_jtt() {
  JTTConfig cfg;
  cfg.early_stop_epochs = 10;
  cfg.upsampling_factor = 20;
  cfg.identification.weight_decay = 0.05;
  cfg.identification.seed = 5;
  cfg.final_phase.epochs = 20;
  cfg.final_phase.seed = 6;
  return cfg;
}

Dataset poisoned_default(std::size_t n, std::uint64_t seed) {
  Dataset ds = testing::make_default_train(n, 0.01, seed);
  AttackSpec spec;
  spec.kind = AttackKind::Dlbd;
  spec.poison_fraction = 0.01;
  spec.base_group = {0, 0};
  spec.target_class = 1;
  spec.trigger = TriggerPattern::make_default(ds.dim);
  return craft_dlbd(ds, spec, seed ^ 1).poisoned;
}

}  // namespace

TEST_CASE("jtt_identify: a model that fits everything flags nothing") {
  // Wide-margin blobs with almost no noise: ten epochs fit them exactly.
  GroupSpec spec = GroupSpec::make_default(8, 6.0, 0.0, 0.2);
  spec.proportions = {0.5, 0.0, 0.5, 0.0};
  spec.poison_fraction = 0.0;
  const Dataset ds = generate_dataset(spec, 400, 3);

  JTTConfig cfg = quick_jtt();
  cfg.identification.weight_decay = 0.0;
  const AmplificationSet amp = jtt_identify(ds, cfg);
  CHECK(amp.ids.empty());
  CHECK(amp.multiplicity == 20);
}

TEST_CASE("jtt_identify: untrained zero model flags everything but class 0") {
  const Dataset ds = testing::make_default_train(500, 0.0, 7);
  JTTConfig cfg = quick_jtt();
  cfg.early_stop_epochs = 0;
  const ModelParams zeros = ModelParams::zeros(ds.dim, 32, ds.n_classes);
  const AmplificationSet amp = jtt_identify(ds, cfg, zeros);
  // Uniform outputs: the argmax tie-break picks class 0.
  std::set<std::int64_t> expected;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] != 0) expected.insert(ds.ids[i]);
  CHECK(amp.ids == expected);
}

TEST_CASE("jtt_identify: reproducible given the seed") {
  const Dataset ds = poisoned_default(1000, 11);
  const JTTConfig cfg = quick_jtt();
  CHECK(jtt_identify(ds, cfg).ids == jtt_identify(ds, cfg).ids);
}

TEST_CASE("jtt_train: interventions obey set algebra exactly") {
  const Dataset train_ds = poisoned_default(1200, 13);
  const Dataset val = testing::make_default_train(300, 0.0, 14);
  const JTTConfig cfg = quick_jtt();
  const std::vector<std::int64_t> poisons = train_ds.poison_ids();
  const std::set<std::int64_t> poison_set(poisons.begin(), poisons.end());

  const JTTResult standard = jtt_train(train_ds, val, cfg, Intervention::Standard);
  const JTTResult ideal = jtt_train(train_ds, val, cfg, Intervention::Ideal);
  const JTTResult worst = jtt_train(train_ds, val, cfg, Intervention::Worst);

  // Used(Ideal) = Used(Standard) \ Poisons, Used(Worst) = Used(Standard) u Poisons.
  std::set<std::int64_t> minus = standard.used.ids;
  for (std::int64_t id : poisons) minus.erase(id);
  CHECK(ideal.used.ids == minus);
  std::set<std::int64_t> plus = standard.used.ids;
  plus.insert(poison_set.begin(), poison_set.end());
  CHECK(worst.used.ids == plus);

  for (std::int64_t id : ideal.used.ids) CHECK(!poison_set.count(id));
  for (std::int64_t id : poisons) CHECK(worst.used.ids.count(id) == 1);
}

TEST_CASE("jtt_train: unit upsampling reproduces plain training") {
  const Dataset train_ds = testing::make_default_train(600, 0.0, 15);
  const Dataset val = testing::make_default_train(200, 0.0, 16);
  JTTConfig cfg = quick_jtt();
  cfg.upsampling_factor = 1;
  const JTTResult res = jtt_train(train_ds, val, cfg, Intervention::Standard);

  const ModelParams m0 = ModelParams::random_init(
      train_ds.dim, 32, train_ds.n_classes, mix_seed(cfg.final_phase.seed, 19));
  // Multiplicity one: the replicated schedule equals the original dataset.
  const TrainResult plain = train(m0, train_ds, cfg.final_phase, nullptr, &val);
  CHECK(res.params.values == plain.params.values);
}

TEST_CASE("jtt_train: exclusion list drops ids from the used set") {
  const Dataset train_ds = poisoned_default(800, 21);
  const Dataset val = testing::make_default_train(200, 0.0, 22);
  const JTTConfig cfg = quick_jtt();
  const JTTResult standard = jtt_train(train_ds, val, cfg, Intervention::Standard);
  REQUIRE(!standard.used.ids.empty());
  std::set<std::int64_t> excluded{*standard.used.ids.begin()};
  const JTTResult pruned =
      jtt_train(train_ds, val, cfg, Intervention::Standard, &excluded);
  CHECK(pruned.used.ids.count(*excluded.begin()) == 0);
  CHECK(pruned.used.ids.size() == standard.used.ids.size() - 1);
}

TEST_CASE("kmeans: separated blobs recovered exactly") {
  Eigen::MatrixXd pts(12, 2);
  for (int i = 0; i < 6; ++i) pts.row(i) << 0.0 + 0.01 * i, 0.0;
  for (int i = 6; i < 12; ++i) pts.row(i) << 10.0 + 0.01 * i, 0.0;
  const std::vector<int> assign = kmeans_assign(pts, 2, 50, 3);
  for (int i = 1; i < 6; ++i) CHECK(assign[i] == assign[0]);
  for (int i = 7; i < 12; ++i) CHECK(assign[i] == assign[6]);
  CHECK(assign[0] != assign[6]);
  CHECK(mean_silhouette(pts, assign, 2) > 0.9);
}

TEST_CASE("george_cluster: two latent blobs in one class give k=2") {
  // Latents are relu of the first two coordinates under an identity-like model.
  ModelParams probe = ModelParams::zeros(4, 2, 2);
  probe.values(0) = 1.0;  // W1(0,0)
  probe.values(5) = 1.0;  // W1(1,1): column-major (d=4, h=2)
  Dataset ds;
  ds.dim = 4;
  ds.features = Eigen::MatrixXd::Zero(60, 4);
  auto rng = make_rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int i = 0; i < 60; ++i) {
    const bool second_blob = i % 2 == 1;
    const bool class1 = i >= 40;
    ds.features(i, 0) = (class1 ? 3.0 : second_blob ? 1.0 : 6.0) + noise(rng);
    ds.features(i, 1) = (class1 ? 3.0 : second_blob ? 6.0 : 1.0) + noise(rng);
    ds.groups.push_back({class1 ? 1 : 0, 0});
    ds.labels.push_back(class1 ? 1 : 0);
    ds.provenance.push_back(AttackKind::None);
    ds.ids.push_back(i);
    ds.base_ids.push_back(-1);
  }
  const PseudoGroups groups = george_cluster(ds, probe, 6, 31);
  CHECK(groups.clusters_per_class.at(0) == 2);
  // Brute-force: members of each chosen cluster share their blob.
  std::map<int, std::set<bool>> blob_of_cluster;
  for (int i = 0; i < 40; ++i)
    blob_of_cluster[groups.cluster_of.at(i)].insert(i % 2 == 1);
  for (const auto& [cluster, blobs] : blob_of_cluster) CHECK(blobs.size() == 1);
}

TEST_CASE("george_cluster: identical latents collapse to one cluster") {
  const ModelParams zeros = ModelParams::zeros(4, 2, 2);  // latents all zero
  const Dataset ds = testing::make_counted({{{0, 0}, 30}, {{1, 0}, 30}});
  const PseudoGroups groups = george_cluster(ds, zeros, 5, 3);
  CHECK(groups.clusters_per_class.at(0) == 1);
  CHECK(groups.clusters_per_class.at(1) == 1);
  CHECK(groups.n_clusters == 2);
}

TEST_CASE("george_cluster: every id assigned exactly once") {
  const Dataset ds = poisoned_default(900, 33);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 34;
  const ModelParams erm =
      train(ModelParams::random_init(ds.dim, 32, 2, 35), ds, cfg).params;
  const PseudoGroups groups = george_cluster(ds, erm, 6, 36);
  CHECK(groups.cluster_of.size() == ds.size());
  for (std::int64_t id : ds.ids) CHECK(groups.cluster_of.count(id) == 1);
}

TEST_CASE("group_dro_step: fixed points and monotonicity") {
  DROState state = DROState::uniform(3, 0.5);
  const Eigen::VectorXd sizes = Eigen::VectorXd::Constant(3, 10.0);

  SUBCASE("equal losses leave q unchanged") {
    group_dro_step(state, Eigen::VectorXd::Constant(3, 1.7), sizes);
    for (int g = 0; g < 3; ++g) CHECK(state.q(g) == doctest::Approx(1.0 / 3));
  }
  SUBCASE("the highest-loss group gains weight") {
    Eigen::Vector3d losses(0.5, 2.0, 0.5);
    group_dro_step(state, losses, sizes);
    CHECK(state.q(1) > 1.0 / 3);
    CHECK(state.q(0) < 1.0 / 3);
    CHECK(state.q(0) == doctest::Approx(state.q(2)));
  }
  SUBCASE("zero step size freezes q") {
    state.step_size = 0.0;
    Eigen::Vector3d losses(0.1, 5.0, 2.0);
    group_dro_step(state, losses, sizes);
    for (int g = 0; g < 3; ++g) CHECK(state.q(g) == doctest::Approx(1.0 / 3));
  }
}

TEST_CASE("group_dro_step: q stays a probability vector over 1e4 steps") {
  DROState state = DROState::uniform(4, 0.01);
  auto rng = make_rng(37);
  std::uniform_real_distribution<double> loss(0.0, 3.0);
  const Eigen::VectorXd sizes = Eigen::VectorXd::Constant(4, 5.0);
  for (int it = 0; it < 10000; ++it) {
    Eigen::VectorXd losses(4);
    for (int g = 0; g < 4; ++g) losses(g) = loss(rng);
    const Eigen::VectorXd weights = group_dro_step(state, losses, sizes);
    CHECK(std::abs(state.q.sum() - 1.0) < 1e-9);
    CHECK(state.q.minCoeff() >= 0.0);
    CHECK(weights.minCoeff() >= 0.0);
  }
}

TEST_CASE("dro loop beats erm on the worst group of a skewed dataset") {
  // 90/10 class split with a weak minority signal: ERM underfits group 1.
  GroupSpec spec = GroupSpec::make_default(6, 1.0, 0.0, 1.0);
  spec.proportions = {0.9, 0.0, 0.1, 0.0};
  spec.poison_fraction = 0.0;
  const Dataset ds = generate_dataset(spec, 600, 39);

  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.seed = 40;
  ModelParams params =
      train(ModelParams::random_init(ds.dim, 16, 2, 41), ds, cfg).params;

  const auto group_losses = [&](const ModelParams& m) {
    Eigen::Vector2d sums = Eigen::Vector2d::Zero();
    Eigen::Vector2d counts = Eigen::Vector2d::Zero();
    const Eigen::MatrixXd probs = forward_probs(m, ds.features);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      sums(ds.labels[i]) -=
          std::log(std::max(probs(static_cast<Eigen::Index>(i), ds.labels[i]),
                            kLossProbFloor));
      counts(ds.labels[i]) += 1.0;
    }
    return Eigen::Vector2d(sums.array() / counts.array());
  };

  const Eigen::Vector2d erm_losses = group_losses(params);
  const double erm_worst = erm_losses.maxCoeff();
  REQUIRE(erm_worst > erm_losses.mean());  // the premise of the check

  DROState state = DROState::uniform(2, 0.05);
  std::vector<int> labels = ds.labels;
  std::vector<double> weights(ds.size());
  Eigen::Vector2d counts = Eigen::Vector2d::Zero();
  for (std::size_t i = 0; i < ds.size(); ++i) counts(ds.labels[i]) += 1.0;
  for (int step = 0; step < 200; ++step) {
    const Eigen::Vector2d losses = group_losses(params);
    const Eigen::VectorXd per_group = group_dro_step(state, losses, counts);
    for (std::size_t i = 0; i < ds.size(); ++i)
      weights[i] = per_group(ds.labels[i]);
    params.values -= 0.1 * weighted_gradient(params, ds.features, labels, weights, 0.0);
  }
  CHECK(group_losses(params).maxCoeff() < erm_worst);
}

TEST_CASE("george_train: pseudo-group partition and poison relocation") {
  const Dataset train_ds = poisoned_default(900, 43);
  const Dataset val = testing::make_default_train(200, 0.0, 44);
  GeorgeConfig cfg;
  cfg.erm.epochs = 12;
  cfg.erm.seed = 45;
  cfg.dro.epochs = 8;
  cfg.dro.seed = 46;
  cfg.max_clusters = 6;
  cfg.cluster_seed = 47;

  const GeorgeResult ideal = george_train(train_ds, val, cfg, Intervention::Ideal);
  CHECK(ideal.pseudo_groups.cluster_of.size() == train_ds.size());
  const std::vector<std::int64_t> poisons = train_ds.poison_ids();
  for (std::int64_t id : poisons) {
    const int cluster = ideal.pseudo_groups.cluster_of.at(id);
    const int cls = ideal.pseudo_groups.class_of_cluster.at(cluster);
    CHECK(cluster != ideal.pseudo_groups.smallest_cluster_of_class(cls));
    CHECK(ideal.amplified.count(id) == 0);
  }

  const GeorgeResult worst = george_train(train_ds, val, cfg, Intervention::Worst);
  for (std::int64_t id : poisons) CHECK(worst.amplified.count(id) == 1);
}

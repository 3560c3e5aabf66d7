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

#include <cmath>

#include "tension/metrics.hpp"
#include "test_support.hpp"

using namespace tension;

namespace {

ModelParams sign_model(int dim, double bias) {
  ModelParams m = ModelParams::zeros(dim, 1, 2);
  m.values(0) = 1.0;                // W1(0,0)
  m.values(dim) = bias;             // b1
  m.values(dim + 1 + 1) = 1.0;      // W2(0,1)
  return m;
}

ModelParams constant_class(int dim, int cls) {
  ModelParams m = ModelParams::zeros(dim, 1, 2);
  const Eigen::Index b2 = static_cast<Eigen::Index>(dim) + 1 + 2;
  m.values(b2 + cls) = 5.0;
  return m;
}

}  // namespace

TEST_CASE("wga: minimum over groups") {
  GroupAccuracies ga;
  ga.per_group[{0, 0}] = 0.90;
  ga.per_group[{0, 1}] = 0.80;
  ga.per_group[{1, 0}] = 0.50;
  ga.per_group[{1, 1}] = 0.95;
  CHECK(wga(ga) == 0.50);

  GroupAccuracies single;
  single.per_group[{0, 0}] = 0.42;
  CHECK(wga(single) == 0.42);

  GroupAccuracies equal;
  for (int y = 0; y < 2; ++y)
    for (int a = 0; a < 2; ++a) equal.per_group[{y, a}] = 0.7;
  CHECK(wga(equal) == 0.7);

  CHECK_THROWS_AS(wga(GroupAccuracies{}), DomainError);
}

TEST_CASE("wga never exceeds overall accuracy") {
  const Dataset ds = testing::make_default_train(2000, 0.0, 3);
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const ModelParams m = ModelParams::random_init(ds.dim, 8, 2, seed);
    const EvalResult eval = evaluate(m, ds);
    CHECK(wga(eval) <= eval.overall_accuracy + 1e-12);
  }
}

TEST_CASE("asr_dlbd: model ignoring the trigger scores zero") {
  Dataset ds = testing::make_counted({{{0, 0}, 10}, {{1, 0}, 10}}, 6);
  for (std::size_t i = 0; i < ds.size(); ++i)
    ds.features(i, 0) = ds.groups[i].class_label == 0 ? -1.0 : 1.0;
  TriggerPattern trigger;
  trigger.coordinates = {4, 5};
  trigger.values = {4.0, 4.0};
  const auto asr = asr_dlbd(sign_model(6, 0.0), ds, trigger, 1);
  REQUIRE(asr.has_value());
  CHECK(*asr == 0.0);
}

TEST_CASE("asr_dlbd: matches an exhaustive per-sample recount") {
  const Dataset ds = testing::make_default_train(500, 0.0, 17);
  const ModelParams m = ModelParams::random_init(ds.dim, 16, 2, 18);
  const TriggerPattern trigger = TriggerPattern::make_default(ds.dim, 2.0);
  const auto asr = asr_dlbd(m, ds, trigger, 1);

  std::size_t correct = 0, flipped = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Eigen::VectorXd x = ds.features.row(i);
    if (predict_class(forward(m, x).probs) != ds.labels[i]) continue;
    ++correct;
    if (predict_class(forward(m, apply_trigger(x, trigger)).probs) != ds.labels[i])
      ++flipped;
  }
  REQUIRE(asr.has_value());
  CHECK(*asr == doctest::Approx(static_cast<double>(flipped) / correct).epsilon(1e-12));
}

TEST_CASE("asr_gm: fraction of missed targets") {
  std::vector<Sample> targets;
  for (int i = 0; i < 5; ++i) {
    Sample s;
    s.features = Eigen::VectorXd::Zero(4);
    s.features(0) = -1.0;  // true class 0 under the sign model
    s.group = {0, 0};
    s.label = 0;
    s.id = i;
    targets.push_back(s);
  }
  CHECK(asr_gm(constant_class(4, 1), targets, 1) == 1.0);  // all misclassified
  CHECK(asr_gm(constant_class(4, 0), targets, 1) == 0.0);  // none
  targets[2].features(0) = 1.0;  // one target crosses the boundary
  CHECK(asr_gm(sign_model(4, 0.0), targets, 1) == doctest::Approx(0.2));
}

TEST_CASE("asr_sa: relative drop arithmetic, including the negative case") {
  // 25 class-0 samples; a model with bias b predicts class 1 iff x0 > -b.
  Dataset target = testing::make_counted({{{0, 0}, 25}}, 4);
  for (std::size_t i = 0; i < 15; ++i) target.features(i, 0) = -2.0;
  for (std::size_t i = 15; i < 20; ++i) target.features(i, 0) = -0.5;
  for (std::size_t i = 20; i < 24; ++i) target.features(i, 0) = 0.8;
  target.features(24, 0) = 0.5;

  const ModelParams clean = sign_model(4, 0.0);     // 20 correct, 0.80
  const ModelParams poisoned = sign_model(4, 1.0);  // 15 correct, 0.60
  auto asr = asr_sa(poisoned, clean, target);
  REQUIRE(asr.has_value());
  CHECK(*asr == doctest::Approx(0.25));  // (0.80 - 0.60) / 0.80

  const ModelParams helped = sign_model(4, -0.6);  // 21 correct, 0.84
  asr = asr_sa(helped, clean, target);
  REQUIRE(asr.has_value());
  CHECK(*asr == doctest::Approx(-0.05));

  CHECK(*asr_sa(clean, clean, target) == 0.0);
}

TEST_CASE("idnf and elmf: intersection fractions") {
  std::vector<std::int64_t> group;
  for (int i = 0; i < 100; ++i) group.push_back(i);
  std::set<std::int64_t> amplified;
  for (int i = 0; i < 94; ++i) amplified.insert(i);
  CHECK(*idnf(amplified, group) == doctest::Approx(0.94));

  std::set<std::int64_t> disjoint{1000, 1001};
  CHECK(*idnf(disjoint, group) == 0.0);

  std::set<std::int64_t> superset;
  for (int i = -10; i < 200; ++i) superset.insert(i);
  CHECK(*elmf(superset, group) == 1.0);

  CHECK(!idnf(amplified, {}).has_value());
}

TEST_CASE("idnf: monotone under supersets") {
  std::vector<std::int64_t> group{1, 2, 3, 4, 5, 6, 7, 8};
  std::set<std::int64_t> small{2, 4};
  std::set<std::int64_t> big{2, 4, 6, 100};
  CHECK(*idnf(small, group) <= *idnf(big, group));
}

TEST_CASE("aggregate_runs: hand-checked mean and standard deviation") {
  const std::vector<RunValues> runs{{{"asr", 0.10}}, {{"asr", 0.20}}, {{"asr", 0.30}}};
  const MetricsReport report = aggregate_runs(runs);
  CHECK(report.at("asr").mean == doctest::Approx(0.20));
  CHECK(report.at("asr").stddev == doctest::Approx(0.10));
  CHECK(report.at("asr").n_runs == 3);
}

TEST_CASE("aggregate_runs: degenerate deviations") {
  CHECK(aggregate_runs({{{"acc", 0.5}}}).at("acc").stddev == 0.0);
  const std::vector<RunValues> same{{{"acc", 0.5}}, {{"acc", 0.5}}, {{"acc", 0.5}}};
  CHECK(aggregate_runs(same).at("acc").stddev == 0.0);
}

TEST_CASE("aggregate_runs: schema mismatch rejected") {
  const std::vector<RunValues> runs{{{"acc", 0.5}}, {{"wga", 0.5}}};
  CHECK_THROWS_AS(aggregate_runs(runs), DomainError);
  CHECK_THROWS_AS(aggregate_runs({}), DomainError);
}

TEST_CASE("report json uses flat fixed keys") {
  const MetricsReport report =
      aggregate_runs({{{"acc", 0.9}, {"wga", 0.5}}, {{"acc", 0.8}, {"wga", 0.6}}});
  const auto j = report_to_json(report);
  CHECK(j.contains("acc_mean"));
  CHECK(j.contains("acc_std"));
  CHECK(j.contains("wga_mean"));
  CHECK(j.at("n_runs") == 2);
}

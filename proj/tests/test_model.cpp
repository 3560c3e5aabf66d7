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

#include "tension/model.hpp"
#include "test_support.hpp"

using namespace tension;

namespace {

// Reads a flat parameter vector; mutates one block by hand.
void set_value(ModelParams& m, Eigen::Index i, double v) { m.values(i) = v; }

// h=1 threshold model: class 1 iff x0 + bias > 0 (tie goes to class 0).
ModelParams threshold_model(int dim, double bias) {
  ModelParams m = ModelParams::zeros(dim, 1, 2);
  set_value(m, 0, 1.0);         // W1(0,0)
  set_value(m, dim, bias);      // b1
  set_value(m, dim + 1 + 1, 1.0);  // W2(0,1): latent drives class-1 logit
  return m;
}

// Constant output model: logits = b2.
ModelParams constant_model(int dim, double logit0, double logit1) {
  ModelParams m = ModelParams::zeros(dim, 1, 2);
  const Eigen::Index b2 = static_cast<Eigen::Index>(dim) * 1 + 1 + 1 * 2;
  set_value(m, b2, logit0);
  set_value(m, b2 + 1, logit1);
  return m;
}

Dataset two_blob_dataset(std::size_t n_per_class, double margin, double noise,
                         std::uint64_t seed) {
  GroupSpec spec = GroupSpec::make_default(6, margin, 0.0, noise);
  spec.proportions = {0.5, 0.0, 0.5, 0.0};
  spec.poison_fraction = 0.0;
  return generate_dataset(spec, 2 * n_per_class, seed);
}

Eigen::MatrixXd random_batch(int n, int dim, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = dist(rng);
  return x;
}

double finite_diff_check(const ModelParams& m, const Eigen::MatrixXd& x,
                         const std::vector<int>& labels, double weight_decay) {
  const Eigen::VectorXd analytic = gradient(m, x, labels, weight_decay);
  Eigen::VectorXd fd(m.size());
  const double step = 1e-5;
  ModelParams probe = m;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const double saved = probe.values(i);
    const auto loss_at = [&](double v) {
      probe.values(i) = v;
      double total = 0.0;
      for (Eigen::Index r = 0; r < x.rows(); ++r)
        total += per_sample_loss(probe, x.row(r), labels[static_cast<std::size_t>(r)]);
      total /= static_cast<double>(x.rows());
      total += 0.5 * weight_decay * probe.values.squaredNorm();
      return total;
    };
    fd(i) = (loss_at(saved + step) - loss_at(saved - step)) / (2.0 * step);
    probe.values(i) = saved;
  }
  const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
  return (analytic - fd).cwiseAbs().maxCoeff() / scale;
}

}  // namespace

TEST_CASE("forward: zero parameters give the uniform output") {
  const ModelParams m = ModelParams::zeros(8, 4, 3);
  const auto out = forward(m, Eigen::VectorXd::Random(8));
  for (int c = 0; c < 3; ++c) CHECK(out.probs(c) == doctest::Approx(1.0 / 3));
}

TEST_CASE("forward: softmax normalization on random inputs") {
  const ModelParams m = ModelParams::random_init(10, 16, 4, 3);
  const Eigen::MatrixXd x = random_batch(100, 10, 5);
  const Eigen::MatrixXd probs = forward_probs(m, x);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-9);
    CHECK(probs.row(i).minCoeff() >= 0.0);
  }
}

TEST_CASE("forward: binary outputs are exact complements") {
  const ModelParams m = ModelParams::random_init(6, 8, 2, 9);
  const Eigen::MatrixXd x = random_batch(50, 6, 11);
  const Eigen::MatrixXd probs = forward_probs(m, x);
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    CHECK(std::abs(probs(i, 0) + probs(i, 1) - 1.0) <= 1e-15);
}

TEST_CASE("forward: dimension mismatch rejected") {
  const ModelParams m = ModelParams::zeros(8, 4, 2);
  CHECK_THROWS_AS(forward(m, Eigen::VectorXd::Zero(5)), DomainError);
}

TEST_CASE("per_sample_loss: uniform output gives ln C") {
  const ModelParams m = ModelParams::zeros(4, 2, 2);
  CHECK(per_sample_loss(m, Eigen::VectorXd::Zero(4), 0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("per_sample_loss: known probabilities") {
  // Constant logits (ln 0.3, ln 0.7) produce exactly those probabilities.
  const ModelParams m = constant_model(4, std::log(0.3), std::log(0.7));
  const Eigen::VectorXd x = Eigen::VectorXd::Ones(4);
  CHECK(per_sample_loss(m, x, 0) == doctest::Approx(1.2040).epsilon(1e-4));
  CHECK(per_sample_loss(m, x, 1) == doctest::Approx(0.3567).epsilon(1e-4));
}

TEST_CASE("per_sample_loss: vanishes as the true-class probability saturates") {
  const ModelParams m = constant_model(4, -30.0, 30.0);
  CHECK(per_sample_loss(m, Eigen::VectorXd::Zero(4), 1) < 1e-9);
}

TEST_CASE("gradient: matches central finite differences") {
  const ModelParams m = ModelParams::random_init(7, 5, 3, 21);
  const Eigen::MatrixXd x = random_batch(5, 7, 22);
  const std::vector<int> labels{0, 1, 2, 1, 0};
  CHECK(finite_diff_check(m, x, labels, 0.0) < 1e-4);
  CHECK(finite_diff_check(m, x, labels, 0.1) < 1e-4);
}

TEST_CASE("gradient: invariant under batch duplication") {
  const ModelParams m = ModelParams::random_init(6, 4, 2, 3);
  const Eigen::MatrixXd x = random_batch(4, 6, 8);
  const std::vector<int> labels{0, 1, 1, 0};
  Eigen::MatrixXd xx(8, 6);
  xx << x, x;
  const std::vector<int> ll{0, 1, 1, 0, 0, 1, 1, 0};
  CHECK((gradient(m, x, labels, 0.0) - gradient(m, xx, ll, 0.0)).norm() < 1e-12);
}

TEST_CASE("gradient: per-sample mean plus decay equals batch gradient") {
  const ModelParams m = ModelParams::random_init(6, 4, 2, 3);
  const Eigen::MatrixXd x = random_batch(9, 6, 8);
  std::vector<int> labels;
  for (int i = 0; i < 9; ++i) labels.push_back(i % 2);
  const Eigen::MatrixXd per = per_sample_gradients(m, x, labels);
  const Eigen::VectorXd mean =
      per.colwise().mean().transpose() + 0.05 * m.values;
  CHECK((mean - gradient(m, x, labels, 0.05)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("weighted_gradient: uniform weights equal the plain gradient") {
  const ModelParams m = ModelParams::random_init(6, 4, 2, 3);
  const Eigen::MatrixXd x = random_batch(5, 6, 8);
  const std::vector<int> labels{0, 1, 0, 1, 0};
  const std::vector<double> w(5, 2.5);
  CHECK((weighted_gradient(m, x, labels, w, 0.01) - gradient(m, x, labels, 0.01))
            .cwiseAbs()
            .maxCoeff() < 1e-12);
}

TEST_CASE("train: zero epochs returns the initial parameters") {
  const Dataset ds = two_blob_dataset(20, 2.0, 1.0, 4);
  ModelParams m0 = ModelParams::random_init(ds.dim, 8, 2, 5);
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK(train(m0, ds, cfg).params.values == m0.values);
}

TEST_CASE("train: separable blobs reach 99% train accuracy") {
  const Dataset ds = two_blob_dataset(200, 4.0, 0.5, 6);
  ModelParams m0 = ModelParams::random_init(ds.dim, 8, 2, 7);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 8;
  const ModelParams m = train(m0, ds, cfg).params;
  CHECK(evaluate(m, ds).overall_accuracy >= 0.99);
}

TEST_CASE("train: all-ones weights match the unweighted run exactly") {
  const Dataset ds = two_blob_dataset(50, 2.0, 1.0, 9);
  ModelParams m0 = ModelParams::random_init(ds.dim, 8, 2, 10);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 11;
  std::map<std::int64_t, int> weights;
  for (std::int64_t id : ds.ids) weights[id] = 1;
  const auto a = train(m0, ds, cfg);
  const auto b = train(m0, ds, cfg, &weights);
  CHECK(a.params.values == b.params.values);
}

TEST_CASE("train: deterministic given identical inputs") {
  const Dataset ds = two_blob_dataset(50, 2.0, 1.0, 12);
  ModelParams m0 = ModelParams::random_init(ds.dim, 8, 2, 13);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.seed = 14;
  CHECK(train(m0, ds, cfg).params.values == train(m0, ds, cfg).params.values);
}

TEST_CASE("train: single step descends the sample loss at small rates") {
  TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 1;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m0 = ModelParams::random_init(5, 4, 2, 100 + trial);
    Dataset ds;
    ds.dim = 5;
    ds.features = random_batch(1, 5, 200 + trial);
    ds.groups = {GroupLabel{trial % 2, 0}};
    ds.labels = {trial % 2};
    ds.provenance = {AttackKind::None};
    ds.ids = {0};
    ds.base_ids = {-1};
    const double before = per_sample_loss(m0, ds.features.row(0), ds.labels[0]);
    const ModelParams m1 = train(m0, ds, cfg).params;
    const double after = per_sample_loss(m1, ds.features.row(0), ds.labels[0]);
    CHECK(after <= before);
  }
}

TEST_CASE("evaluate: perfect and constant classifiers") {
  Dataset ds = testing::make_counted(
      {{{0, 0}, 5}, {{0, 1}, 5}, {{1, 0}, 5}, {{1, 1}, 5}}, 4);
  for (std::size_t i = 0; i < ds.size(); ++i)
    ds.features(i, 0) = ds.groups[i].class_label == 0 ? -1.0 : 1.0;

  const ModelParams perfect = threshold_model(4, 0.0);
  const EvalResult good = evaluate(perfect, ds);
  for (const auto& [g, acc] : good.group_accuracy) CHECK(acc == 1.0);
  CHECK(good.misclassified.empty());

  const ModelParams constant = constant_model(4, 1.0, 0.0);
  const EvalResult bad = evaluate(constant, ds);
  CHECK(bad.group_accuracy.at({0, 0}) == 1.0);
  CHECK(bad.group_accuracy.at({0, 1}) == 1.0);
  CHECK(bad.group_accuracy.at({1, 0}) == 0.0);
  CHECK(bad.group_accuracy.at({1, 1}) == 0.0);
}

TEST_CASE("evaluate: misclassified set complements the correct set") {
  const Dataset ds = two_blob_dataset(100, 1.0, 2.0, 15);
  const ModelParams m = ModelParams::random_init(ds.dim, 8, 2, 16);
  const EvalResult eval = evaluate(m, ds);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    correct += eval.predictions[i] == ds.labels[i];
  CHECK(correct + eval.misclassified.size() == ds.size());
}

TEST_CASE("evaluate: empty groups are absent, not zero") {
  const Dataset ds = testing::make_counted({{{0, 0}, 5}});
  const EvalResult eval = evaluate(constant_model(4, 1.0, 0.0), ds);
  CHECK(eval.group_accuracy.count({1, 1}) == 0);
  CHECK(eval.group_accuracy.size() == 1);
}

TEST_CASE("checkpoint json round trip") {
  const ModelParams m = ModelParams::random_init(6, 4, 3, 77);
  const ModelParams back = params_from_json(nlohmann::json::parse(params_to_json(m).dump()));
  CHECK(back.dim == m.dim);
  CHECK(back.hidden == m.hidden);
  CHECK(back.n_classes == m.n_classes);
  CHECK(back.values == m.values);
}

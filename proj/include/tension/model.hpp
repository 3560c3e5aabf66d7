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
// One-hidden-layer relu softmax classifier over a flat parameter vector,
// with per-sample loss/gradient/latent access and a deterministic
// momentum-SGD training loop.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tension/common.hpp"
#include "tension/synth_data.hpp"

namespace tension {

// Cross-entropy uses a probability floor so confident mistakes stay finite.
inline constexpr double kLossProbFloor = 1e-12;

// Flat layout: [W1 (dim x hidden, col-major) | b1 | W2 (hidden x classes) | b2].
struct ModelParams {
  int dim = 0;
  int hidden = 0;
  int n_classes = 0;
  Eigen::VectorXd values;

  static ModelParams zeros(int dim, int hidden, int n_classes);
  static ModelParams random_init(int dim, int hidden, int n_classes, std::uint64_t seed);

  Eigen::Index size() const { return values.size(); }
  static Eigen::Index param_count(int dim, int hidden, int n_classes);

  Eigen::Map<const Eigen::MatrixXd> w1() const;
  Eigen::Map<const Eigen::VectorXd> b1() const;
  Eigen::Map<const Eigen::MatrixXd> w2() const;
  Eigen::Map<const Eigen::VectorXd> b2() const;
};

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 40;
  int batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PredictionOutput {
  Eigen::VectorXd probs;
  Eigen::VectorXd latent;
  std::optional<double> loss;  // set when a label was supplied
};

PredictionOutput forward(const ModelParams& m, const Eigen::VectorXd& x);
PredictionOutput forward(const ModelParams& m, const Eigen::VectorXd& x, int label);

double per_sample_loss(const ModelParams& m, const Eigen::VectorXd& x, int label);

// Batched forward passes; one row per sample.
Eigen::MatrixXd forward_probs(const ModelParams& m, const Eigen::MatrixXd& x);
Eigen::MatrixXd forward_latent(const ModelParams& m, const Eigen::MatrixXd& x);

// Argmax with ties resolved to the lowest class index.
int predict_class(const Eigen::VectorXd& probs);
std::vector<int> predict_classes(const ModelParams& m, const Eigen::MatrixXd& x);

// Gradient of the mean cross-entropy over the batch plus weight_decay * params.
Eigen::VectorXd gradient(const ModelParams& m, const Eigen::MatrixXd& x,
                         const std::vector<int>& labels, double weight_decay = 0.0);

// One row per sample; no weight-decay term.
Eigen::MatrixXd per_sample_gradients(const ModelParams& m, const Eigen::MatrixXd& x,
                                     const std::vector<int>& labels);

// sum_i weights[i] * grad_i / sum_i weights[i], plus weight decay.
Eigen::VectorXd weighted_gradient(const ModelParams& m, const Eigen::MatrixXd& x,
                                  const std::vector<int>& labels,
                                  const std::vector<double>& weights,
                                  double weight_decay = 0.0);

struct EvalResult {
  std::map<GroupLabel, double> group_accuracy;   // clean groups present in ds
  std::optional<double> poison_accuracy;         // poisons as their own pseudo-group
  double overall_accuracy = 0.0;
  std::set<std::int64_t> misclassified;
  std::vector<int> predictions;
};

EvalResult evaluate(const ModelParams& m, const Dataset& ds);

struct TrainLog {
  std::vector<double> epoch_loss;      // mean per-sample loss seen that epoch
  std::vector<double> epoch_val_wga;   // empty unless selection enabled
  int selected_epoch = -1;             // -1 => final parameters returned
};

struct TrainResult {
  ModelParams params;
  TrainLog log;
};

// Shuffled mini-batch SGD with momentum and weight decay. `sample_weights`
// maps id -> multiplicity; an id with weight w appears w times per epoch
// (missing ids default to 1). When `selection_val` is given, the
// parameters with the best validation worst-group accuracy are returned
// (earliest epoch on ties).
TrainResult train(const ModelParams& m0, const Dataset& ds, const TrainConfig& cfg,
                  const std::map<std::int64_t, int>* sample_weights = nullptr,
                  const Dataset* selection_val = nullptr);

// Checkpoint document {d, h, C, values}.
nlohmann::ordered_json params_to_json(const ModelParams& m);
ModelParams params_from_json(const nlohmann::json& j);

}  // namespace tension

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
#include "tension/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tension {

Eigen::Index ModelParams::param_count(int dim, int hidden, int n_classes) {
  return static_cast<Eigen::Index>(dim) * hidden + hidden +
         static_cast<Eigen::Index>(hidden) * n_classes + n_classes;
}

ModelParams ModelParams::zeros(int dim, int hidden, int n_classes) {
  ModelParams m;
  m.dim = dim;
  m.hidden = hidden;
  m.n_classes = n_classes;
  m.values = Eigen::VectorXd::Zero(param_count(dim, hidden, n_classes));
  return m;
}

ModelParams ModelParams::random_init(int dim, int hidden, int n_classes,
                                     std::uint64_t seed) {
  ModelParams m = zeros(dim, hidden, n_classes);
  auto rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const double s1 = std::sqrt(2.0 / dim);
  const double s2 = std::sqrt(2.0 / hidden);
  double* p = m.values.data();
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(dim) * hidden; ++i)
    *p++ = s1 * dist(rng);
  p += hidden;  // b1 stays zero
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(hidden) * n_classes; ++i)
    *p++ = s2 * dist(rng);
  return m;
}

Eigen::Map<const Eigen::MatrixXd> ModelParams::w1() const {
  return {values.data(), dim, hidden};
}
Eigen::Map<const Eigen::VectorXd> ModelParams::b1() const {
  return {values.data() + static_cast<Eigen::Index>(dim) * hidden, hidden};
}
Eigen::Map<const Eigen::MatrixXd> ModelParams::w2() const {
  return {values.data() + static_cast<Eigen::Index>(dim) * hidden + hidden, hidden,
          n_classes};
}
Eigen::Map<const Eigen::VectorXd> ModelParams::b2() const {
  return {values.data() + static_cast<Eigen::Index>(dim) * hidden + hidden +
              static_cast<Eigen::Index>(hidden) * n_classes,
          n_classes};
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("TrainConfig: learning rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ConfigError("TrainConfig: momentum outside [0,1)");
  if (weight_decay < 0.0) throw ConfigError("TrainConfig: negative weight decay");
  if (epochs < 0) throw ConfigError("TrainConfig: negative epoch count");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch size must be >= 1");
}

namespace {

void softmax_rows_inplace(Eigen::MatrixXd& logits) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double hi = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - hi).exp();
    logits.row(i) /= logits.row(i).sum();
  }
}

struct BatchActivations {
  Eigen::MatrixXd pre;     // n x hidden
  Eigen::MatrixXd latent;  // relu(pre)
  Eigen::MatrixXd probs;   // n x classes
};

BatchActivations run_batch(const ModelParams& m, const Eigen::MatrixXd& x) {
  if (x.cols() != m.dim) throw DomainError("forward: feature dimension mismatch");
  BatchActivations act;
  act.pre = (x * m.w1()).rowwise() + m.b1().transpose();
  act.latent = act.pre.cwiseMax(0.0);
  Eigen::MatrixXd logits = (act.latent * m.w2()).rowwise() + m.b2().transpose();
  softmax_rows_inplace(logits);
  act.probs = std::move(logits);
  return act;
}

// dlogits rows must already carry any per-sample scaling; accumulates the
// full backward pass into `grad`.
void backward_into(const ModelParams& m, const Eigen::MatrixXd& x,
                   const BatchActivations& act, const Eigen::MatrixXd& dlogits,
                   Eigen::VectorXd& grad) {
  const Eigen::Index n_w1 = static_cast<Eigen::Index>(m.dim) * m.hidden;
  const Eigen::Index n_w2 = static_cast<Eigen::Index>(m.hidden) * m.n_classes;
  Eigen::Map<Eigen::MatrixXd> gw1(grad.data(), m.dim, m.hidden);
  Eigen::Map<Eigen::VectorXd> gb1(grad.data() + n_w1, m.hidden);
  Eigen::Map<Eigen::MatrixXd> gw2(grad.data() + n_w1 + m.hidden, m.hidden, m.n_classes);
  Eigen::Map<Eigen::VectorXd> gb2(grad.data() + n_w1 + m.hidden + n_w2, m.n_classes);

  gw2.noalias() += act.latent.transpose() * dlogits;
  gb2.noalias() += dlogits.colwise().sum().transpose();
  Eigen::MatrixXd dpre =
      (dlogits * m.w2().transpose()).cwiseProduct((act.pre.array() > 0.0).cast<double>().matrix());
  gw1.noalias() += x.transpose() * dpre;
  gb1.noalias() += dpre.colwise().sum().transpose();
}

}  // namespace

PredictionOutput forward(const ModelParams& m, const Eigen::VectorXd& x) {
  const BatchActivations act = run_batch(m, x.transpose());
  PredictionOutput out;
  out.probs = act.probs.row(0);
  out.latent = act.latent.row(0);
  return out;
}

PredictionOutput forward(const ModelParams& m, const Eigen::VectorXd& x, int label) {
  PredictionOutput out = forward(m, x);
  if (label < 0 || label >= m.n_classes) throw DomainError("forward: label out of range");
  out.loss = -std::log(std::max(out.probs(label), kLossProbFloor));
  return out;
}

double per_sample_loss(const ModelParams& m, const Eigen::VectorXd& x, int label) {
  return *forward(m, x, label).loss;
}

Eigen::MatrixXd forward_probs(const ModelParams& m, const Eigen::MatrixXd& x) {
  return run_batch(m, x).probs;
}

Eigen::MatrixXd forward_latent(const ModelParams& m, const Eigen::MatrixXd& x) {
  return run_batch(m, x).latent;
}

int predict_class(const Eigen::VectorXd& probs) {
  int best = 0;
  for (int c = 1; c < probs.size(); ++c)
    if (probs(c) > probs(best)) best = c;
  return best;
}

std::vector<int> predict_classes(const ModelParams& m, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd probs = forward_probs(m, x);
  std::vector<int> out(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    out[i] = predict_class(probs.row(i));
  return out;
}

Eigen::VectorXd gradient(const ModelParams& m, const Eigen::MatrixXd& x,
                         const std::vector<int>& labels, double weight_decay) {
  if (x.rows() == 0) throw DomainError("gradient: empty batch");
  if (static_cast<std::size_t>(x.rows()) != labels.size())
    throw DomainError("gradient: label count mismatch");
  const BatchActivations act = run_batch(m, x);
  Eigen::MatrixXd dlogits = act.probs;
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) dlogits(i, labels[i]) -= 1.0;
  dlogits *= inv_n;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.size());
  backward_into(m, x, act, dlogits, grad);
  if (weight_decay != 0.0) grad += weight_decay * m.values;
  return grad;
}

Eigen::MatrixXd per_sample_gradients(const ModelParams& m, const Eigen::MatrixXd& x,
                                     const std::vector<int>& labels) {
  if (x.rows() == 0) throw DomainError("per_sample_gradients: empty batch");
  Eigen::MatrixXd out(x.rows(), m.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::MatrixXd row = x.row(i);
    out.row(i) = gradient(m, row, {labels[i]}, 0.0);
  }
  return out;
}

Eigen::VectorXd weighted_gradient(const ModelParams& m, const Eigen::MatrixXd& x,
                                  const std::vector<int>& labels,
                                  const std::vector<double>& weights,
                                  double weight_decay) {
  if (x.rows() == 0) throw DomainError("weighted_gradient: empty batch");
  if (weights.size() != static_cast<std::size_t>(x.rows()))
    throw DomainError("weighted_gradient: weight count mismatch");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total <= 0.0) throw DomainError("weighted_gradient: weights sum to zero");
  const BatchActivations act = run_batch(m, x);
  Eigen::MatrixXd dlogits = act.probs;
  for (Eigen::Index i = 0; i < x.rows(); ++i) dlogits(i, labels[i]) -= 1.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) dlogits.row(i) *= weights[i] / total;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.size());
  backward_into(m, x, act, dlogits, grad);
  if (weight_decay != 0.0) grad += weight_decay * m.values;
  return grad;
}

EvalResult evaluate(const ModelParams& m, const Dataset& ds) {
  EvalResult res;
  if (ds.empty()) return res;
  res.predictions = predict_classes(m, ds.features);

  std::map<GroupLabel, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  std::size_t poison_correct = 0, poison_total = 0, correct_total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const bool correct = res.predictions[i] == ds.labels[i];
    if (!correct) res.misclassified.insert(ds.ids[i]);
    correct_total += correct;
    if (ds.is_poison(i)) {
      poison_correct += correct;
      ++poison_total;
    } else {
      auto& [good, total] = tally[ds.groups[i]];
      good += correct;
      ++total;
    }
  }
  for (const auto& [g, counts] : tally)
    res.group_accuracy[g] =
        static_cast<double>(counts.first) / static_cast<double>(counts.second);
  if (poison_total > 0)
    res.poison_accuracy =
        static_cast<double>(poison_correct) / static_cast<double>(poison_total);
  res.overall_accuracy = static_cast<double>(correct_total) / static_cast<double>(ds.size());
  return res;
}

namespace {

double worst_group_accuracy(const EvalResult& eval) {
  double worst = 1.0;
  bool seen = false;
  for (const auto& [g, acc] : eval.group_accuracy) {
    worst = std::min(worst, acc);
    seen = true;
  }
  return seen ? worst : 0.0;
}

}  // namespace

TrainResult train(const ModelParams& m0, const Dataset& ds, const TrainConfig& cfg,
                  const std::map<std::int64_t, int>* sample_weights,
                  const Dataset* selection_val) {
  cfg.validate();
  if (ds.empty()) throw DomainError("train: empty dataset");
  if (ds.dim != m0.dim) throw DomainError("train: dataset/model dimension mismatch");

  // Replication realizes integer sample weights (weight 0 drops the id).
  std::vector<Eigen::Index> schedule;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int w = 1;
    if (sample_weights) {
      auto it = sample_weights->find(ds.ids[i]);
      if (it != sample_weights->end()) w = it->second;
    }
    if (w < 0) throw DomainError("train: negative sample weight");
    for (int k = 0; k < w; ++k) schedule.push_back(static_cast<Eigen::Index>(i));
  }
  if (schedule.empty()) throw DomainError("train: all sample weights zero");

  TrainResult result;
  result.params = m0;
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(m0.size());
  auto rng = make_rng(cfg.seed);

  ModelParams best = m0;
  double best_wga = -1.0;
  if (selection_val) {
    best_wga = worst_group_accuracy(evaluate(m0, *selection_val));
    result.log.selected_epoch = 0;  // epoch 0 = untrained
  }

  Eigen::MatrixXd batch_x;
  std::vector<int> batch_labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(schedule.begin(), schedule.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < schedule.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(schedule.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Eigen::Index n = static_cast<Eigen::Index>(stop - start);
      batch_x.resize(n, ds.dim);
      batch_labels.resize(static_cast<std::size_t>(n));
      for (Eigen::Index k = 0; k < n; ++k) {
        batch_x.row(k) = ds.features.row(schedule[start + static_cast<std::size_t>(k)]);
        batch_labels[static_cast<std::size_t>(k)] =
            ds.labels[static_cast<std::size_t>(schedule[start + static_cast<std::size_t>(k)])];
      }
      const BatchActivations act = run_batch(result.params, batch_x);
      Eigen::MatrixXd dlogits = act.probs;
      for (Eigen::Index i = 0; i < n; ++i) {
        loss_sum -= std::log(std::max(act.probs(i, batch_labels[i]), kLossProbFloor));
        dlogits(i, batch_labels[i]) -= 1.0;
      }
      dlogits *= 1.0 / static_cast<double>(n);
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(result.params.size());
      backward_into(result.params, batch_x, act, dlogits, grad);
      if (cfg.weight_decay != 0.0) grad += cfg.weight_decay * result.params.values;
      velocity = cfg.momentum * velocity + grad;
      result.params.values -= cfg.learning_rate * velocity;
    }
    result.log.epoch_loss.push_back(loss_sum / static_cast<double>(schedule.size()));
    if (selection_val) {
      const double wga = worst_group_accuracy(evaluate(result.params, *selection_val));
      result.log.epoch_val_wga.push_back(wga);
      if (wga > best_wga) {
        best_wga = wga;
        best = result.params;
        result.log.selected_epoch = epoch + 1;
      }
    }
  }
  if (selection_val) result.params = std::move(best);
  return result;
}

nlohmann::ordered_json params_to_json(const ModelParams& m) {
  nlohmann::ordered_json j;
  j["d"] = m.dim;
  j["h"] = m.hidden;
  j["C"] = m.n_classes;
  j["values"] = std::vector<double>(m.values.begin(), m.values.end());
  return j;
}

ModelParams params_from_json(const nlohmann::json& j) {
  ModelParams m;
  m.dim = j.at("d").get<int>();
  m.hidden = j.at("h").get<int>();
  m.n_classes = j.at("C").get<int>();
  const auto values = j.at("values").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(values.size()) !=
      ModelParams::param_count(m.dim, m.hidden, m.n_classes))
    throw ConfigError("params_from_json: value count mismatch");
  m.values = Eigen::Map<const Eigen::VectorXd>(values.data(),
                                               static_cast<Eigen::Index>(values.size()));
  return m;
}

}  // namespace tension

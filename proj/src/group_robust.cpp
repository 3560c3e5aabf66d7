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
#include "tension/group_robust.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tension/metrics.hpp"

namespace tension {

std::map<std::int64_t, int> AmplificationSet::as_weights() const {
  std::map<std::int64_t, int> weights;
  for (std::int64_t id : ids) weights[id] = multiplicity;
  return weights;
}

std::vector<std::int64_t> PseudoGroups::members(int cluster) const {
  std::vector<std::int64_t> out;
  for (const auto& [id, c] : cluster_of)
    if (c == cluster) out.push_back(id);
  return out;
}

int PseudoGroups::smallest_cluster_of_class(int class_label) const {
  std::map<int, std::size_t> sizes;
  for (const auto& [id, c] : cluster_of)
    if (class_of_cluster.at(c) == class_label) ++sizes[c];
  int best = -1;
  std::size_t best_size = std::numeric_limits<std::size_t>::max();
  for (const auto& [c, size] : sizes) {
    if (size < best_size) {
      best = c;
      best_size = size;
    }
  }
  if (best < 0) throw DomainError("smallest_cluster_of_class: class has no clusters");
  return best;
}

DROState DROState::uniform(int n_groups, double step_size) {
  if (n_groups < 1) throw DomainError("DROState: need at least one group");
  DROState s;
  s.q = Eigen::VectorXd::Constant(n_groups, 1.0 / n_groups);
  s.step_size = step_size;
  return s;
}

AmplificationSet jtt_identify(const Dataset& ds, const JTTConfig& cfg,
                              const std::optional<ModelParams>& initial) {
  if (cfg.upsampling_factor < 1)
    throw ConfigError("jtt_identify: upsampling factor must be >= 1");
  if (cfg.early_stop_epochs < 0)
    throw ConfigError("jtt_identify: negative early stop");

  TrainConfig ident = cfg.identification;
  ident.epochs = cfg.early_stop_epochs;
  const int hidden = initial ? initial->hidden : 32;
  ModelParams m0 = initial ? *initial
                           : ModelParams::random_init(ds.dim, hidden, ds.n_classes,
                                                      mix_seed(ident.seed, 17));
  const ModelParams ident_model = train(m0, ds, ident).params;

  AmplificationSet amp;
  amp.multiplicity = cfg.upsampling_factor;
  amp.ids = evaluate(ident_model, ds).misclassified;
  return amp;
}

namespace {

AmplificationSet apply_intervention(const AmplificationSet& identified,
                                    const std::vector<std::int64_t>& poison_ids,
                                    Intervention intervention) {
  AmplificationSet used = identified;
  switch (intervention) {
    case Intervention::Standard:
      break;
    case Intervention::Ideal:
      for (std::int64_t id : poison_ids) used.ids.erase(id);
      break;
    case Intervention::Worst:
      used.ids.insert(poison_ids.begin(), poison_ids.end());
      break;
  }
  return used;
}

}  // namespace

JTTResult jtt_train(const Dataset& train_ds, const Dataset& val, const JTTConfig& cfg,
                    Intervention intervention,
                    const std::set<std::int64_t>* excluded) {
  JTTResult res;
  res.identified = jtt_identify(train_ds, cfg);
  res.used = apply_intervention(res.identified, train_ds.poison_ids(), intervention);
  if (excluded)
    for (std::int64_t id : *excluded) res.used.ids.erase(id);

  const auto weights = res.used.as_weights();
  const ModelParams m0 = ModelParams::random_init(
      train_ds.dim, 32, train_ds.n_classes, mix_seed(cfg.final_phase.seed, 19));
  TrainResult final_run = train(m0, train_ds, cfg.final_phase, &weights, &val);
  res.params = std::move(final_run.params);
  res.log = std::move(final_run.log);
  return res;
}

std::vector<int> kmeans_assign(const Eigen::MatrixXd& points, int k, int iterations,
                               std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (k < 1 || n == 0) throw DomainError("kmeans_assign: bad inputs");
  if (static_cast<Eigen::Index>(k) > n) throw DomainError("kmeans_assign: k > n");

  // Farthest-point start from a seeded first center.
  auto rng = make_rng(seed);
  std::vector<Eigen::Index> centers;
  centers.push_back(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng));
  Eigen::VectorXd nearest =
      (points.rowwise() - points.row(centers[0])).rowwise().squaredNorm();
  while (static_cast<int>(centers.size()) < k) {
    Eigen::Index far = 0;
    for (Eigen::Index i = 1; i < n; ++i)
      if (nearest(i) > nearest(far)) far = i;  // ties keep the lowest index
    centers.push_back(far);
    nearest = nearest.cwiseMin(
        (points.rowwise() - points.row(far)).rowwise().squaredNorm());
  }

  Eigen::MatrixXd means(k, points.cols());
  for (int c = 0; c < k; ++c) means.row(c) = points.row(centers[c]);

  std::vector<int> assign(n, 0);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points.row(i) - means.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (points.row(i) - means.row(c)).squaredNorm();
        if (d < best_d) {
          best = c;
          best_d = d;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<Eigen::Index> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[i]) += points.row(i);
      ++counts[assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        means.row(c) = sums.row(c) / static_cast<double>(counts[c]);
      } else {
        // Re-seed an empty cluster with the point farthest from its mean.
        Eigen::Index far = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d = (points.row(i) - means.row(assign[i])).squaredNorm();
          if (d > far_d) {
            far = i;
            far_d = d;
          }
        }
        means.row(c) = points.row(far);
        assign[far] = c;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return assign;
}

double mean_silhouette(const Eigen::MatrixXd& points, const std::vector<int>& assign,
                       int k) {
  const Eigen::Index n = points.rows();
  if (n < 2 || k < 2) return 0.0;
  std::vector<std::vector<Eigen::Index>> members(k);
  for (Eigen::Index i = 0; i < n; ++i) members[assign[i]].push_back(i);

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int own = assign[i];
    if (members[own].size() <= 1) continue;  // singleton: silhouette 0
    double a = 0.0;
    for (Eigen::Index j : members[own])
      if (j != i) a += (points.row(i) - points.row(j)).norm();
    a /= static_cast<double>(members[own].size() - 1);

    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == own || members[c].empty()) continue;
      double d = 0.0;
      for (Eigen::Index j : members[c]) d += (points.row(i) - points.row(j)).norm();
      b = std::min(b, d / static_cast<double>(members[c].size()));
    }
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

PseudoGroups george_cluster(const Dataset& ds, const ModelParams& erm_model,
                            int max_clusters, std::uint64_t seed) {
  if (max_clusters < 2) throw ConfigError("george_cluster: max_clusters must be >= 2");
  const Eigen::MatrixXd latents = forward_latent(erm_model, ds.features);

  PseudoGroups out;
  int next_cluster = 0;
  for (int cls = 0; cls < ds.n_classes; ++cls) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
    if (rows.empty()) {
      out.clusters_per_class[cls] = 0;
      continue;
    }
    Eigen::MatrixXd pts(rows.size(), latents.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) pts.row(r) = latents.row(rows[r]);

    // Silhouette over a capped subsample keeps the O(n^2) cost bounded.
    const Eigen::Index cap = 1500;
    std::vector<Eigen::Index> sil_rows(pts.rows());
    std::iota(sil_rows.begin(), sil_rows.end(), 0);
    if (pts.rows() > cap) {
      auto rng = make_rng(seed, 100 + static_cast<std::uint64_t>(cls));
      std::shuffle(sil_rows.begin(), sil_rows.end(), rng);
      sil_rows.resize(cap);
      std::sort(sil_rows.begin(), sil_rows.end());
    }

    int best_k = 1;
    std::vector<int> best_assign(rows.size(), 0);
    double best_score = -std::numeric_limits<double>::infinity();
    const int hi = std::min<int>(max_clusters, static_cast<int>(rows.size()));
    for (int k = 2; k <= hi; ++k) {
      const std::vector<int> assign =
          kmeans_assign(pts, k, 50, mix_seed(seed, 1000 + cls * 64 + k));
      Eigen::MatrixXd sub(sil_rows.size(), pts.cols());
      std::vector<int> sub_assign(sil_rows.size());
      for (std::size_t r = 0; r < sil_rows.size(); ++r) {
        sub.row(r) = pts.row(sil_rows[r]);
        sub_assign[r] = assign[sil_rows[r]];
      }
      const double score = mean_silhouette(sub, sub_assign, k);
      if (score > best_score + 1e-12) {
        best_score = score;
        best_k = k;
        best_assign = assign;
      }
    }
    // All-identical latents produce silhouette 0 for every k; keep one cluster.
    if (best_score <= 0.0) {
      best_k = 1;
      std::fill(best_assign.begin(), best_assign.end(), 0);
    }

    for (int c = 0; c < best_k; ++c) out.class_of_cluster[next_cluster + c] = cls;
    for (std::size_t r = 0; r < rows.size(); ++r)
      out.cluster_of[ds.ids[static_cast<std::size_t>(rows[r])]] =
          next_cluster + best_assign[r];
    out.clusters_per_class[cls] = best_k;
    next_cluster += best_k;
  }
  out.n_clusters = next_cluster;
  return out;
}

Eigen::VectorXd group_dro_step(DROState& state, const Eigen::VectorXd& per_group_losses,
                               const Eigen::VectorXd& group_sizes) {
  if (per_group_losses.size() != state.q.size() ||
      group_sizes.size() != state.q.size())
    throw DomainError("group_dro_step: size mismatch");
  if (!per_group_losses.allFinite()) throw DomainError("group_dro_step: non-finite loss");

  state.q = state.q.array() * (state.step_size * per_group_losses.array()).exp();
  state.q /= state.q.sum();

  Eigen::VectorXd weights(state.q.size());
  for (Eigen::Index g = 0; g < state.q.size(); ++g)
    weights(g) = group_sizes(g) > 0.0 ? state.q(g) / group_sizes(g) : 0.0;
  return weights;
}

GeorgeResult george_train(const Dataset& train_ds, const Dataset& val,
                          const GeorgeConfig& cfg, Intervention intervention) {
  GeorgeResult res;

  const ModelParams m0 = ModelParams::random_init(
      train_ds.dim, 32, train_ds.n_classes, mix_seed(cfg.erm.seed, 23));
  const ModelParams erm_model = train(m0, train_ds, cfg.erm).params;
  res.pseudo_groups =
      george_cluster(train_ds, erm_model, cfg.max_clusters, cfg.cluster_seed);

  // Interventions relocate poisons relative to the smallest cluster of
  // their class: Ideal moves them to the largest cluster, Worst moves all
  // of them into the smallest one.
  const std::vector<std::int64_t> poisons = train_ds.poison_ids();
  if (intervention != Intervention::Standard && !poisons.empty()) {
    std::map<int, std::size_t> sizes;
    for (const auto& [id, c] : res.pseudo_groups.cluster_of) ++sizes[c];
    std::map<std::int64_t, int> label_of;
    for (std::size_t i = 0; i < train_ds.size(); ++i)
      label_of[train_ds.ids[i]] = train_ds.labels[i];
    for (std::int64_t id : poisons) {
      const int cls = label_of.at(id);
      const int smallest = res.pseudo_groups.smallest_cluster_of_class(cls);
      if (intervention == Intervention::Worst) {
        res.pseudo_groups.cluster_of[id] = smallest;
      } else if (res.pseudo_groups.cluster_of.at(id) == smallest) {
        int largest = smallest;
        std::size_t largest_size = 0;
        for (const auto& [c, size] : sizes) {
          if (res.pseudo_groups.class_of_cluster.at(c) != cls || c == smallest)
            continue;
          if (size > largest_size) {
            largest = c;
            largest_size = size;
          }
        }
        res.pseudo_groups.cluster_of[id] = largest;
      }
    }
  }

  for (int cls = 0; cls < train_ds.n_classes; ++cls) {
    if (res.pseudo_groups.clusters_per_class.at(cls) == 0) continue;
    const int smallest = res.pseudo_groups.smallest_cluster_of_class(cls);
    for (const auto& [id, c] : res.pseudo_groups.cluster_of)
      if (c == smallest) res.amplified.insert(id);
  }

  // Phase 2: minibatch SGD where each batch reweights samples by the DRO
  // group weights updated from that batch's per-group mean losses.
  cfg.dro.validate();
  DROState state = DROState::uniform(res.pseudo_groups.n_clusters, cfg.dro_step_size);
  ModelParams params = ModelParams::random_init(train_ds.dim, 32, train_ds.n_classes,
                                                mix_seed(cfg.dro.seed, 29));
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(params.size());
  auto rng = make_rng(cfg.dro.seed);
  std::vector<std::size_t> order(train_ds.size());
  std::iota(order.begin(), order.end(), 0);

  ModelParams best = params;
  double best_wga = wga(evaluate(params, val));
  res.log.selected_epoch = 0;

  for (int epoch = 0; epoch < cfg.dro.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.dro.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.dro.batch_size));
      const Eigen::Index n = static_cast<Eigen::Index>(stop - start);
      Eigen::MatrixXd x(n, train_ds.dim);
      std::vector<int> labels(static_cast<std::size_t>(n));
      std::vector<int> clusters(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) {
        const std::size_t row = order[start + static_cast<std::size_t>(i)];
        x.row(i) = train_ds.features.row(row);
        labels[static_cast<std::size_t>(i)] = train_ds.labels[row];
        clusters[static_cast<std::size_t>(i)] =
            res.pseudo_groups.cluster_of.at(train_ds.ids[row]);
      }
      const Eigen::MatrixXd probs = forward_probs(params, x);
      Eigen::VectorXd group_loss = Eigen::VectorXd::Zero(state.q.size());
      Eigen::VectorXd group_size = Eigen::VectorXd::Zero(state.q.size());
      for (Eigen::Index i = 0; i < n; ++i) {
        const double loss =
            -std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]),
                               kLossProbFloor));
        loss_sum += loss;
        group_loss(clusters[static_cast<std::size_t>(i)]) += loss;
        group_size(clusters[static_cast<std::size_t>(i)]) += 1.0;
      }
      for (Eigen::Index g = 0; g < group_loss.size(); ++g)
        if (group_size(g) > 0.0) group_loss(g) /= group_size(g);
      const Eigen::VectorXd per_group_weight =
          group_dro_step(state, group_loss, group_size);
      std::vector<double> weights(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        weights[static_cast<std::size_t>(i)] =
            per_group_weight(clusters[static_cast<std::size_t>(i)]);
      const Eigen::VectorXd grad =
          weighted_gradient(params, x, labels, weights, cfg.dro.weight_decay);
      velocity = cfg.dro.momentum * velocity + grad;
      params.values -= cfg.dro.learning_rate * velocity;
    }
    res.log.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    const double val_wga = wga(evaluate(params, val));
    res.log.epoch_val_wga.push_back(val_wga);
    if (val_wga > best_wga) {
      best_wga = val_wga;
      best = params;
      res.log.selected_epoch = epoch + 1;
    }
  }
  res.params = std::move(best);
  return res;
}

nlohmann::ordered_json amplification_to_json(const AmplificationSet& set) {
  nlohmann::ordered_json j;
  j["multiplicity"] = set.multiplicity;
  j["ids"] = std::vector<std::int64_t>(set.ids.begin(), set.ids.end());
  return j;
}

nlohmann::ordered_json pseudo_groups_to_json(const PseudoGroups& groups) {
  nlohmann::ordered_json j;
  j["n_clusters"] = groups.n_clusters;
  nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
  for (const auto& [cls, k] : groups.clusters_per_class)
    per_class[std::to_string(cls)] = k;
  j["clusters_per_class"] = std::move(per_class);
  nlohmann::ordered_json clusters = nlohmann::ordered_json::object();
  for (int c = 0; c < groups.n_clusters; ++c)
    clusters[std::to_string(c)] = groups.members(c);
  j["members"] = std::move(clusters);
  return j;
}

}  // namespace tension

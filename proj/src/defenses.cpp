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
#include "tension/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tension/metrics.hpp"

namespace tension {

std::set<std::int64_t> EliminationLog::all_eliminated() const {
  std::set<std::int64_t> out;
  for (const auto& [epoch, records] : by_epoch)
    for (const auto& r : records) out.insert(r.id);
  return out;
}

std::set<std::int64_t> EliminationLog::eliminated_through(int epoch) const {
  std::set<std::int64_t> out;
  for (const auto& [e, records] : by_epoch) {
    if (e > epoch) break;
    for (const auto& r : records) out.insert(r.id);
  }
  return out;
}

namespace {

// Last-layer gradient features: vec(latent (probs - onehot)^T) per sample.
Eigen::MatrixXd gradient_features(const ModelParams& m, const Dataset& ds) {
  const Eigen::MatrixXd latent = forward_latent(m, ds.features);
  Eigen::MatrixXd probs = forward_probs(m, ds.features);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) probs(i, ds.labels[i]) -= 1.0;
  Eigen::MatrixXd feats(ds.size(), latent.cols() * probs.cols());
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    Eigen::Index col = 0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c)
      for (Eigen::Index h = 0; h < latent.cols(); ++h)
        feats(i, col++) = latent(i, h) * probs(i, c);
  }
  return feats;
}

Eigen::MatrixXd pairwise_sq_distances(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Eigen::VectorXd na = a.rowwise().squaredNorm();
  const Eigen::VectorXd nb = b.rowwise().squaredNorm();
  Eigen::MatrixXd d = -2.0 * a * b.transpose();
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

std::set<std::int64_t> epic_isolation_flags(const ModelParams& m,
                                            const Dataset& active,
                                            double medoid_fraction,
                                            double radius_scale,
                                            std::uint64_t /*seed*/) {
  if (active.empty()) throw DomainError("epic_isolation_flags: empty active set");
  if (medoid_fraction <= 0.0 || medoid_fraction >= 1.0 + 1e-12)
    throw ConfigError("epic_isolation_flags: medoid fraction outside (0,1]");

  const Eigen::MatrixXd feats = gradient_features(m, active);
  const Eigen::Index n = feats.rows();
  const auto k = std::min<Eigen::Index>(
      n, static_cast<Eigen::Index>(
             std::ceil(medoid_fraction * static_cast<double>(n))));

  const Eigen::MatrixXd dist2 = pairwise_sq_distances(feats, feats);

  // Medoids: the k most central points (lowest total distance), so
  // isolated outliers never become their own representative.
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  const Eigen::VectorXd centrality = dist2.array().sqrt().matrix().rowwise().sum();
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return centrality(a) < centrality(b);
  });
  order.resize(k);

  Eigen::VectorXd nearest = Eigen::VectorXd::Constant(
      n, std::numeric_limits<double>::infinity());
  for (Eigen::Index medoid : order)
    nearest = nearest.cwiseMin(dist2.col(medoid));
  Eigen::VectorXd nearest_dist = nearest.array().sqrt();

  // Covering radius: smallest radius reaching ceil((1-fraction)*n) points.
  const auto covered = std::min<Eigen::Index>(
      n, static_cast<Eigen::Index>(
             std::ceil((1.0 - medoid_fraction) * static_cast<double>(n))));
  std::vector<double> sorted(nearest_dist.data(), nearest_dist.data() + n);
  std::sort(sorted.begin(), sorted.end());
  const double radius = covered > 0 ? sorted[covered - 1] : 0.0;
  const double cutoff = radius_scale * radius;

  std::set<std::int64_t> flags;
  for (Eigen::Index i = 0; i < n; ++i)
    if (nearest_dist(i) > cutoff) flags.insert(active.ids[static_cast<std::size_t>(i)]);
  return flags;
}

EpicResult epic_train(const Dataset& train_ds, const EpicConfig& cfg,
                      Intervention intervention, const Dataset* val) {
  cfg.train.validate();
  if (cfg.isolation_patience < 1) throw ConfigError("epic_train: patience must be >= 1");
  if (cfg.check_period < 1) throw ConfigError("epic_train: check period must be >= 1");
  if (train_ds.empty()) throw DomainError("epic_train: empty dataset");

  const std::set<std::int64_t> poison_set = [&] {
    const auto v = train_ds.poison_ids();
    return std::set<std::int64_t>(v.begin(), v.end());
  }();
  std::set<std::int64_t> minority_ids;
  if (intervention == Intervention::Worst) {
    for (const GroupLabel& g : minority_groups(train_ds))
      for (std::int64_t id : train_ds.member_ids(g)) minority_ids.insert(id);
  }

  EpicResult res;
  res.params = ModelParams::random_init(train_ds.dim, 32, train_ds.n_classes,
                                        mix_seed(cfg.train.seed, 31));
  Eigen::VectorXd velocity = Eigen::VectorXd::Zero(res.params.size());
  auto rng = make_rng(cfg.train.seed);

  std::vector<std::size_t> active(train_ds.size());
  std::iota(active.begin(), active.end(), 0);
  std::map<std::int64_t, int> streak;
  bool first_check = true;

  ModelParams best = res.params;
  double best_wga = val ? wga(evaluate(res.params, *val)) : 0.0;
  if (val) res.train_log.selected_epoch = 0;

  const auto class_counts = [&](const std::vector<std::size_t>& rows) {
    std::vector<std::size_t> counts(train_ds.n_classes, 0);
    for (std::size_t r : rows) ++counts[static_cast<std::size_t>(train_ds.labels[r])];
    return counts;
  };

  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    std::vector<std::size_t> order = active;
    std::shuffle(order.begin(), order.end(), rng);
    if (cfg.audit_batches) {
      std::set<std::int64_t> ids;
      for (std::size_t r : order) ids.insert(train_ds.ids[r]);
      res.epoch_batch_ids.push_back(std::move(ids));
    }
    double loss_sum = 0.0;
    Eigen::MatrixXd x;
    std::vector<int> labels;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.train.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.train.batch_size));
      const Eigen::Index nb = static_cast<Eigen::Index>(stop - start);
      x.resize(nb, train_ds.dim);
      labels.resize(static_cast<std::size_t>(nb));
      for (Eigen::Index i = 0; i < nb; ++i) {
        const std::size_t row = order[start + static_cast<std::size_t>(i)];
        x.row(i) = train_ds.features.row(row);
        labels[static_cast<std::size_t>(i)] = train_ds.labels[row];
      }
      const Eigen::MatrixXd probs = forward_probs(res.params, x);
      for (Eigen::Index i = 0; i < nb; ++i)
        loss_sum -= std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]),
                                      kLossProbFloor));
      std::vector<double> ones(static_cast<std::size_t>(nb), 1.0);
      const Eigen::VectorXd grad =
          weighted_gradient(res.params, x, labels, ones, cfg.train.weight_decay);
      velocity = cfg.train.momentum * velocity + grad;
      res.params.values -= cfg.train.learning_rate * velocity;
    }
    res.train_log.epoch_loss.push_back(loss_sum /
                                       static_cast<double>(order.size()));

    const bool checking = epoch > cfg.warmup_epochs &&
                          (epoch - cfg.warmup_epochs - 1) % cfg.check_period == 0 &&
                          (!cfg.stop_epoch || epoch <= *cfg.stop_epoch);
    if (checking && !active.empty()) {
      Dataset active_ds;
      {
        std::vector<std::size_t> rows = active;
        active_ds.dim = train_ds.dim;
        active_ds.n_classes = train_ds.n_classes;
        active_ds.n_attributes = train_ds.n_attributes;
        active_ds.features.resize(static_cast<Eigen::Index>(rows.size()), train_ds.dim);
        active_ds.reserve(rows.size());
        Eigen::Index r = 0;
        for (std::size_t i : rows) {
          active_ds.features.row(r++) = train_ds.features.row(i);
          active_ds.groups.push_back(train_ds.groups[i]);
          active_ds.labels.push_back(train_ds.labels[i]);
          active_ds.provenance.push_back(train_ds.provenance[i]);
          active_ds.ids.push_back(train_ds.ids[i]);
          active_ds.base_ids.push_back(train_ds.base_ids[i]);
        }
      }
      const std::set<std::int64_t> flags = epic_isolation_flags(
          res.params, active_ds, cfg.medoid_fraction, cfg.isolation_radius_scale,
          mix_seed(cfg.train.seed, 37));
      res.flagged_any.insert(flags.begin(), flags.end());

      std::set<std::int64_t> candidates;
      for (std::size_t r : active) {
        const std::int64_t id = train_ds.ids[r];
        if (flags.count(id)) {
          if (++streak[id] >= cfg.isolation_patience) candidates.insert(id);
        } else {
          streak[id] = 0;
        }
      }
      if (intervention == Intervention::Ideal) {
        std::set<std::int64_t> only_poisons;
        for (std::int64_t id : candidates)
          if (poison_set.count(id)) only_poisons.insert(id);
        candidates = std::move(only_poisons);
      } else if (intervention == Intervention::Worst && first_check) {
        candidates.insert(minority_ids.begin(), minority_ids.end());
      }
      first_check = false;

      if (!candidates.empty()) {
        std::vector<std::size_t> next_active;
        std::vector<EliminationRecord> removed;
        for (std::size_t r : active) {
          if (candidates.count(train_ds.ids[r])) {
            removed.push_back({train_ds.ids[r], train_ds.groups[r],
                               train_ds.provenance[r]});
          } else {
            next_active.push_back(r);
          }
        }
        const auto counts = class_counts(next_active);
        for (std::size_t c = 0; c < counts.size(); ++c)
          if (counts[c] == 0)
            throw RunError("epic_train: elimination would empty class " +
                           std::to_string(c));
        active = std::move(next_active);
        for (const auto& rec : removed) streak.erase(rec.id);
        res.log.by_epoch[epoch] = std::move(removed);
      }
    }

    if (val) {
      const double val_wga = wga(evaluate(res.params, *val));
      res.train_log.epoch_val_wga.push_back(val_wga);
      if (val_wga > best_wga) {
        best_wga = val_wga;
        best = res.params;
        res.train_log.selected_epoch = epoch;
      }
    }
  }
  if (val) res.params = std::move(best);
  for (std::size_t r : active) res.final_active.insert(train_ds.ids[r]);
  return res;
}

double strip_entropy(const ModelParams& m, const Eigen::VectorXd& x,
                     const Eigen::MatrixXd& clean_pool, const StripConfig& cfg,
                     std::uint64_t seed) {
  if (cfg.overlays < 1) throw ConfigError("strip_entropy: need at least one overlay");
  if (clean_pool.rows() < cfg.overlays)
    throw DomainError("strip_entropy: clean pool smaller than overlay count");
  if (cfg.blend_weight <= 0.0 || cfg.blend_weight >= 1.0)
    throw ConfigError("strip_entropy: blend weight outside (0,1)");

  auto rng = make_rng(seed);
  std::vector<Eigen::Index> pool(clean_pool.rows());
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);

  Eigen::MatrixXd blends(cfg.overlays, x.size());
  for (int r = 0; r < cfg.overlays; ++r)
    blends.row(r) = (1.0 - cfg.blend_weight) * x.transpose() +
                    cfg.blend_weight * clean_pool.row(pool[r]);
  const Eigen::MatrixXd probs = forward_probs(m, blends);
  double total = 0.0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(r, c);
      if (p > 0.0) total -= p * std::log(p);
    }
  return total / static_cast<double>(cfg.overlays);
}

std::map<std::string, std::vector<double>> strip_sweep(
    const ModelParams& m, const std::map<std::string, Eigen::MatrixXd>& groups,
    const Eigen::MatrixXd& clean_pool, const StripConfig& cfg, std::uint64_t seed) {
  if (!std::is_sorted(cfg.thresholds.begin(), cfg.thresholds.end()))
    throw ConfigError("strip_sweep: thresholds must be sorted ascending");

  std::map<std::string, std::vector<double>> curves;
  std::uint64_t stream = 0;
  for (const auto& [name, samples] : groups) {
    std::vector<double> entropies(samples.rows());
    for (Eigen::Index i = 0; i < samples.rows(); ++i)
      entropies[static_cast<std::size_t>(i)] = strip_entropy(
          m, samples.row(i), clean_pool, cfg, mix_seed(seed, stream++));
    std::vector<double>& curve = curves[name];
    curve.reserve(cfg.thresholds.size());
    for (double threshold : cfg.thresholds) {
      std::size_t flagged = 0;
      for (double h : entropies) flagged += h < threshold;
      curve.push_back(samples.rows() == 0
                          ? 0.0
                          : static_cast<double>(flagged) /
                                static_cast<double>(samples.rows()));
    }
  }
  return curves;
}

std::optional<double> elmf(const EliminationLog& log,
                           const std::vector<std::int64_t>& group_members) {
  return elmf(log.all_eliminated(), group_members);
}

std::string elimination_log_csv(const EliminationLog& log) {
  std::ostringstream out;
  out << "check_epoch,id,group,provenance\n";
  for (const auto& [epoch, records] : log.by_epoch)
    for (const auto& r : records)
      out << epoch << ',' << r.id << ',' << group_name(r.group) << ','
          << attack_kind_name(r.provenance) << '\n';
  return out.str();
}

std::string strip_curves_csv(const std::vector<double>& thresholds,
                             const std::map<std::string, std::vector<double>>& curves) {
  std::ostringstream out;
  out << "threshold,group,detection_rate\n";
  for (const auto& [name, curve] : curves)
    for (std::size_t i = 0; i < curve.size(); ++i)
      out << thresholds[i] << ',' << name << ',' << curve[i] << '\n';
  return out.str();
}

}  // namespace tension

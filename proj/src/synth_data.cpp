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
#include "tension/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tension {

std::string group_name(const GroupLabel& g) {
  return "g" + std::to_string(g.class_label) + "_" + std::to_string(g.attribute);
}

std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::None: return "clean";
    case AttackKind::Dlbd: return "dlbd";
    case AttackKind::Sa: return "sa";
    case AttackKind::Gm: return "gm";
  }
  return "clean";
}

AttackKind attack_kind_from_name(const std::string& name) {
  if (name == "clean") return AttackKind::None;
  if (name == "dlbd") return AttackKind::Dlbd;
  if (name == "sa") return AttackKind::Sa;
  if (name == "gm") return AttackKind::Gm;
  throw ConfigError("unknown attack kind: " + name);
}

GroupSpec GroupSpec::make_default(int dim, double class_margin,
                                  double spurious_margin, double noise_scale) {
  GroupSpec spec;
  spec.dim = dim;
  spec.n_classes = 2;
  spec.n_attributes = 2;
  spec.proportions = {0.72, 0.038, 0.012, 0.22};
  spec.poison_fraction = 0.01;
  spec.class_means = Eigen::MatrixXd::Zero(2, dim);
  spec.class_means(0, 0) = -class_margin;
  spec.class_means(1, 0) = class_margin;
  spec.attribute_means = Eigen::MatrixXd::Zero(2, dim);
  spec.attribute_means(0, 1) = -spurious_margin;
  spec.attribute_means(1, 1) = spurious_margin;
  spec.noise_scale = noise_scale;
  return spec;
}

void GroupSpec::validate() const {
  if (dim <= 0 || n_classes < 2 || n_attributes < 1)
    throw ConfigError("GroupSpec: dim/classes/attributes out of range");
  if (static_cast<int>(proportions.size()) != n_groups())
    throw ConfigError("GroupSpec: expected " + std::to_string(n_groups()) +
                      " proportions, got " + std::to_string(proportions.size()));
  double total = poison_fraction;
  for (double p : proportions) {
    if (p < 0.0 || p > 1.0) throw ConfigError("GroupSpec: proportion outside [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("GroupSpec: proportions plus poison fraction sum to " +
                      std::to_string(total) + ", expected 1");
  if (poison_fraction < 0.0 || poison_fraction >= 1.0)
    throw ConfigError("GroupSpec: poison fraction outside [0,1)");
  if (noise_scale <= 0.0) throw ConfigError("GroupSpec: noise scale must be > 0");
  if (class_means.rows() != n_classes || class_means.cols() != dim ||
      attribute_means.rows() != n_attributes || attribute_means.cols() != dim)
    throw ConfigError("GroupSpec: mean matrix shape mismatch");
}

Sample Dataset::sample(std::size_t i) const {
  Sample s;
  s.features = features.row(i);
  s.group = groups[i];
  s.label = labels[i];
  s.provenance = provenance[i];
  s.id = ids[i];
  s.base_id = base_ids[i];
  return s;
}

void Dataset::reserve(std::size_t n) {
  groups.reserve(n);
  labels.reserve(n);
  provenance.reserve(n);
  ids.reserve(n);
  base_ids.reserve(n);
}

void Dataset::append(const Sample& s) {
  if (s.features.size() != dim) throw DomainError("append: feature dimension mismatch");
  features.conservativeResize(static_cast<Eigen::Index>(size()) + 1, dim);
  features.row(features.rows() - 1) = s.features;
  groups.push_back(s.group);
  labels.push_back(s.label);
  provenance.push_back(s.provenance);
  ids.push_back(s.id);
  base_ids.push_back(s.base_id);
}

std::int64_t Dataset::next_id() const {
  std::int64_t hi = -1;
  for (std::int64_t v : ids) hi = std::max(hi, v);
  return hi + 1;
}

std::vector<std::int64_t> Dataset::poison_ids() const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (is_poison(i)) out.push_back(ids[i]);
  return out;
}

std::vector<std::int64_t> Dataset::member_ids(const GroupLabel& g) const {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (!is_poison(i) && groups[i] == g) out.push_back(ids[i]);
  return out;
}

void Dataset::validate() const {
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < size(); ++i) {
    if (!seen.insert(ids[i]).second)
      throw DomainError("Dataset: duplicate id " + std::to_string(ids[i]));
    if (groups[i].class_label >= n_classes || groups[i].attribute >= n_attributes)
      throw DomainError("Dataset: group label out of range");
    const bool dirty = provenance[i] == AttackKind::Dlbd || provenance[i] == AttackKind::Sa;
    if (dirty && labels[i] == groups[i].class_label)
      throw DomainError("Dataset: dirty-label poison keeping its base class");
    if (!is_poison(i) && labels[i] != groups[i].class_label)
      throw DomainError("Dataset: clean sample with flipped label");
  }
}

Dataset generate_dataset(const GroupSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();

  const int n_groups = spec.n_groups();
  const auto nominal = static_cast<double>(n);
  std::vector<long long> sizes(n_groups);
  for (int g = 0; g < n_groups; ++g)
    sizes[g] = std::llround(spec.proportions[g] * nominal);
  const long long poison_slots = std::llround(spec.poison_fraction * nominal);
  const long long clean_target = static_cast<long long>(n) - poison_slots;

  // Rounding remainder lands on the largest group (first such on ties).
  long long total = std::accumulate(sizes.begin(), sizes.end(), 0LL);
  if (total != clean_target) {
    int largest = 0;
    for (int g = 1; g < n_groups; ++g)
      if (sizes[g] > sizes[largest]) largest = g;
    sizes[largest] += clean_target - total;
    if (sizes[largest] < 0) throw ConfigError("generate_dataset: negative group size");
  }

  Dataset ds;
  ds.dim = spec.dim;
  ds.n_classes = spec.n_classes;
  ds.n_attributes = spec.n_attributes;
  ds.features.resize(clean_target, spec.dim);
  ds.reserve(static_cast<std::size_t>(clean_target));

  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::int64_t id = 0;
  for (int g = 0; g < n_groups; ++g) {
    const GroupLabel label{g / spec.n_attributes, g % spec.n_attributes};
    const Eigen::VectorXd mean = spec.class_means.row(label.class_label) +
                                 spec.attribute_means.row(label.attribute);
    for (long long k = 0; k < sizes[g]; ++k) {
      for (int j = 0; j < spec.dim; ++j)
        ds.features(id, j) = mean(j) + spec.noise_scale * noise(rng);
      ds.groups.push_back(label);
      ds.labels.push_back(label.class_label);
      ds.provenance.push_back(AttackKind::None);
      ds.ids.push_back(id);
      ds.base_ids.push_back(-1);
      ++id;
    }
  }
  return ds;
}

GroupCounts group_counts(const Dataset& ds) {
  GroupCounts counts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.is_poison(i))
      ++counts.poisons;
    else
      ++counts.clean[ds.groups[i]];
  }
  return counts;
}

std::size_t GroupCounts::clean_total() const {
  std::size_t total = 0;
  for (const auto& [g, c] : clean) total += c;
  return total;
}

std::set<GroupLabel> minority_groups(const Dataset& ds, double factor) {
  if (ds.empty()) throw DomainError("minority_groups: empty dataset");
  if (factor <= 0.0 || factor >= 1.0)
    throw DomainError("minority_groups: factor must be in (0,1)");
  const GroupCounts counts = group_counts(ds);
  const double average = static_cast<double>(counts.clean_total()) /
                         (ds.n_classes * ds.n_attributes);
  std::set<GroupLabel> out;
  for (const auto& [g, c] : counts.clean)
    if (static_cast<double>(c) < factor * average) out.insert(g);
  return out;
}

namespace {

Dataset make_like(const Dataset& ds) {
  Dataset out;
  out.dim = ds.dim;
  out.n_classes = ds.n_classes;
  out.n_attributes = ds.n_attributes;
  out.features.resize(0, ds.dim);
  return out;
}

Dataset take_rows(const Dataset& ds, const std::vector<std::size_t>& rows) {
  Dataset out = make_like(ds);
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.dim);
  out.reserve(rows.size());
  Eigen::Index r = 0;
  for (std::size_t i : rows) {
    out.features.row(r++) = ds.features.row(i);
    out.groups.push_back(ds.groups[i]);
    out.labels.push_back(ds.labels[i]);
    out.provenance.push_back(ds.provenance[i]);
    out.ids.push_back(ds.ids[i]);
    out.base_ids.push_back(ds.base_ids[i]);
  }
  return out;
}

}  // namespace

std::array<Dataset, 3> split(const Dataset& ds, const SplitFractions& fractions,
                             std::uint64_t seed) {
  const std::array<double, 3> f{fractions.train, fractions.val, fractions.test};
  double sum = 0.0;
  for (double v : f) {
    if (v < 0.0) throw ConfigError("split: negative fraction");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split: fractions sum to " + std::to_string(sum));

  // Strata: one per clean group; poisons go to train wholesale.
  std::map<GroupLabel, std::vector<std::size_t>> strata;
  std::vector<std::size_t> poison_rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.is_poison(i))
      poison_rows.push_back(i);
    else
      strata[ds.groups[i]].push_back(i);
  }

  auto rng = make_rng(seed);
  std::array<std::vector<std::size_t>, 3> parts;
  for (auto& [g, rows] : strata) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t m = rows.size();
    // Largest-remainder allocation keeps per-group proportions tight.
    std::array<std::size_t, 3> take{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (int p = 0; p < 3; ++p) {
      const double exact = f[p] * static_cast<double>(m);
      take[p] = static_cast<std::size_t>(exact);
      frac[p] = exact - static_cast<double>(take[p]);
      assigned += take[p];
    }
    while (assigned < m) {
      int best = 0;
      for (int p = 1; p < 3; ++p)
        if (frac[p] > frac[best]) best = p;
      ++take[best];
      frac[best] = -1.0;
      ++assigned;
    }
    std::size_t cursor = 0;
    for (int p = 0; p < 3; ++p) {
      for (std::size_t k = 0; k < take[p]; ++k) parts[p].push_back(rows[cursor++]);
    }
  }
  for (std::size_t i : poison_rows) parts[0].push_back(i);
  for (auto& rows : parts) std::sort(rows.begin(), rows.end());
  return {take_rows(ds, parts[0]), take_rows(ds, parts[1]), take_rows(ds, parts[2])};
}

std::vector<Dataset> partition_clients(const Dataset& ds, std::size_t n_clients,
                                       PartitionMode mode,
                                       double minority_holder_fraction,
                                       std::uint64_t seed,
                                       double minority_factor) {
  if (n_clients < 1) throw ConfigError("partition_clients: need at least one client");
  if (n_clients > ds.size())
    throw ConfigError("partition_clients: more clients than samples");

  auto rng = make_rng(seed);
  std::vector<std::vector<std::size_t>> shards(n_clients);

  if (mode == PartitionMode::Iid) {
    std::vector<std::size_t> rows(ds.size());
    std::iota(rows.begin(), rows.end(), 0);
    std::shuffle(rows.begin(), rows.end(), rng);
    for (std::size_t i = 0; i < rows.size(); ++i)
      shards[i % n_clients].push_back(rows[i]);
  } else {
    if (minority_holder_fraction <= 0.0 || minority_holder_fraction > 1.0)
      throw ConfigError("partition_clients: holder fraction outside (0,1]");
    const std::set<GroupLabel> minorities = minority_groups(ds, minority_factor);
    const std::size_t n_holders = std::min<std::size_t>(
        n_clients,
        static_cast<std::size_t>(std::ceil(minority_holder_fraction *
                                           static_cast<double>(n_clients))));

    std::vector<std::size_t> holder_ids(n_clients);
    std::iota(holder_ids.begin(), holder_ids.end(), 0);
    std::shuffle(holder_ids.begin(), holder_ids.end(), rng);
    holder_ids.resize(n_holders);

    std::vector<std::size_t> minority_rows;
    std::vector<std::size_t> majority_rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.is_poison(i) || minorities.count(ds.groups[i]))
        minority_rows.push_back(i);
      else
        majority_rows.push_back(i);
    }
    std::shuffle(minority_rows.begin(), minority_rows.end(), rng);
    std::shuffle(majority_rows.begin(), majority_rows.end(), rng);

    for (std::size_t i = 0; i < minority_rows.size(); ++i)
      shards[holder_ids[i % n_holders]].push_back(minority_rows[i]);

    // Fill every client up to a balanced total with majority samples.
    std::vector<std::size_t> capacity(n_clients);
    const std::size_t base = ds.size() / n_clients;
    const std::size_t extra = ds.size() % n_clients;
    for (std::size_t c = 0; c < n_clients; ++c) {
      const std::size_t target = base + (c < extra ? 1 : 0);
      capacity[c] = target > shards[c].size() ? target - shards[c].size() : 0;
    }
    std::size_t cursor = 0;
    for (std::size_t c = 0; c < n_clients && cursor < majority_rows.size(); ++c) {
      while (capacity[c] > 0 && cursor < majority_rows.size()) {
        shards[c].push_back(majority_rows[cursor++]);
        --capacity[c];
      }
    }
    // Leftovers (capacity exhausted by uneven minority piles) round-robin.
    std::size_t c = 0;
    while (cursor < majority_rows.size()) {
      shards[c % n_clients].push_back(majority_rows[cursor++]);
      ++c;
    }
  }

  std::vector<Dataset> out;
  out.reserve(n_clients);
  for (auto& rows : shards) {
    std::sort(rows.begin(), rows.end());
    out.push_back(take_rows(ds, rows));
  }
  return out;
}

nlohmann::ordered_json dataset_to_json(const Dataset& ds) {
  nlohmann::ordered_json j;
  j["d"] = ds.dim;
  j["C"] = ds.n_classes;
  j["A"] = ds.n_attributes;
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    nlohmann::ordered_json s;
    s["id"] = ds.ids[i];
    s["x"] = std::vector<double>(ds.features.row(i).begin(), ds.features.row(i).end());
    s["y"] = ds.groups[i].class_label;
    s["a"] = ds.groups[i].attribute;
    s["label"] = ds.labels[i];
    s["provenance"] = attack_kind_name(ds.provenance[i]);
    samples.push_back(std::move(s));
  }
  j["samples"] = std::move(samples);
  return j;
}

Dataset dataset_from_json(const nlohmann::json& j) {
  Dataset ds;
  ds.dim = j.at("d").get<int>();
  ds.n_classes = j.at("C").get<int>();
  ds.n_attributes = j.at("A").get<int>();
  const auto& samples = j.at("samples");
  ds.features.resize(static_cast<Eigen::Index>(samples.size()), ds.dim);
  ds.reserve(samples.size());
  Eigen::Index r = 0;
  for (const auto& s : samples) {
    const auto x = s.at("x").get<std::vector<double>>();
    if (static_cast<int>(x.size()) != ds.dim)
      throw ConfigError("dataset_from_json: feature dimension mismatch");
    for (int c = 0; c < ds.dim; ++c) ds.features(r, c) = x[c];
    ++r;
    ds.groups.push_back({s.at("y").get<int>(), s.at("a").get<int>()});
    ds.labels.push_back(s.at("label").get<int>());
    ds.provenance.push_back(attack_kind_from_name(s.at("provenance").get<std::string>()));
    ds.ids.push_back(s.at("id").get<std::int64_t>());
    ds.base_ids.push_back(-1);
  }
  ds.validate();
  return ds;
}

}  // namespace tension

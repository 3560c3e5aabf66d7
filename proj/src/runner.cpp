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
#include "tension/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tension {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& defaults,
                                   const std::string& where) {
  check_keys(j, {"lr", "momentum", "weight_decay", "epochs", "batch_size"}, where);
  TrainConfig cfg = defaults;
  read(j, "lr", cfg.learning_rate);
  read(j, "momentum", cfg.momentum);
  read(j, "weight_decay", cfg.weight_decay);
  read(j, "epochs", cfg.epochs);
  read(j, "batch_size", cfg.batch_size);
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
  return {{"lr", cfg.learning_rate},
          {"momentum", cfg.momentum},
          {"weight_decay", cfg.weight_decay},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size}};
}

GroupLabel group_from_json(const json& j, const std::string& where) {
  check_keys(j, {"class", "attribute"}, where);
  GroupLabel g;
  read(j, "class", g.class_label);
  read(j, "attribute", g.attribute);
  return g;
}

std::string intervention_name(Intervention i) {
  switch (i) {
    case Intervention::Standard: return "standard";
    case Intervention::Ideal: return "ideal";
    case Intervention::Worst: return "worst";
  }
  return "standard";
}

Intervention intervention_from_name(const std::string& name) {
  if (name == "standard") return Intervention::Standard;
  if (name == "ideal") return Intervention::Ideal;
  if (name == "worst") return Intervention::Worst;
  throw ConfigError("unknown intervention: " + name);
}

// Default hyper-parameters for the desk-scale synthetic setting. The
// identification model is under-trained with strong weight decay so it
// keeps missing the hard-to-learn samples it is meant to flag.
TrainConfig default_erm() {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.momentum = 0.9;
  cfg.weight_decay = 1e-4;
  cfg.epochs = 40;
  cfg.batch_size = 128;
  return cfg;
}

JTTConfig default_jtt() {
  JTTConfig cfg;
  cfg.early_stop_epochs = 15;
  cfg.upsampling_factor = 100;
  cfg.identification = default_erm();
  cfg.identification.weight_decay = 0.05;
  cfg.final_phase = default_erm();
  cfg.final_phase.epochs = 60;
  return cfg;
}

GeorgeConfig default_george() {
  GeorgeConfig cfg;
  cfg.erm = default_erm();
  cfg.dro = default_erm();
  cfg.dro.learning_rate = 0.02;
  cfg.dro.epochs = 40;
  cfg.max_clusters = 10;
  cfg.dro_step_size = 0.05;
  return cfg;
}

EpicConfig default_epic() {
  EpicConfig cfg;
  cfg.train = default_erm();
  cfg.train.epochs = 15;
  return cfg;
}

StripConfig default_strip(int n_classes) {
  StripConfig cfg;
  const double max_entropy = std::log(static_cast<double>(n_classes));
  const int n = 15;
  for (int i = 0; i < n; ++i)
    cfg.thresholds.push_back(i == n - 1 ? max_entropy
                                        : max_entropy * i / (n - 1));
  return cfg;
}

}  // namespace

void ScenarioConfig::validate() const {
  if (repetitions < 1) throw ConfigError("scenario: repetitions must be >= 1");
  if (data.n_classes != 2 || data.n_attributes != 2)
    throw ConfigError("scenario: only 2 classes x 2 attributes supported");
  if (static_cast<int>(data.proportions.size()) !=
      data.n_classes * data.n_attributes)
    throw ConfigError("scenario: need one proportion per group");
  if (data.n_train < 1 || data.n_val < 1 || data.n_test < 1)
    throw ConfigError("scenario: dataset sizes must be >= 1");
  if (federated) {
    if (defense != DefenseKind::None)
      throw ConfigError("scenario: federated and centralized defense are exclusive");
    if (method != MethodKind::None)
      throw ConfigError("scenario: federated runs do not take a centralized method");
    federated->validate();
  }
  if (combined.enabled) {
    if (method != MethodKind::Jtt || defense != DefenseKind::Epic)
      throw ConfigError("scenario: combined pipeline needs method=jtt, defense=epic");
    if (combined.stop_epoch < 0)
      throw ConfigError("scenario: negative combined stop epoch");
  } else if (defense == DefenseKind::Epic && method != MethodKind::None) {
    throw ConfigError("scenario: epic with a method requires combined mode");
  }
  if (defense == DefenseKind::Strip) {
    if (!attack || attack->kind != AttackKind::Dlbd)
      throw ConfigError("scenario: strip needs a dlbd attack for triggered inputs");
  }
  if (attack) {
    if (attack->poison_fraction < 0.0 || attack->poison_fraction >= 1.0)
      throw ConfigError("scenario: poison fraction outside [0,1)");
    if (attack->kind == AttackKind::None)
      throw ConfigError("scenario: attack kind none");
  }
}

ScenarioConfig config_from_json(const json& j) {
  check_keys(j,
             {"name", "data", "attack", "erm", "method", "defense", "federated",
              "intervention", "combined", "repetitions", "seed"},
             "scenario");
  ScenarioConfig cfg;
  cfg.erm = default_erm();
  cfg.jtt = default_jtt();
  cfg.george = default_george();
  cfg.epic = default_epic();
  read(j, "name", cfg.name);
  read(j, "repetitions", cfg.repetitions);
  read(j, "seed", cfg.base_seed);

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d,
               {"n_train", "n_val", "n_test", "dim", "classes", "attributes",
                "proportions", "class_margin", "spurious_margin", "noise"},
               "data");
    read(d, "n_train", cfg.data.n_train);
    read(d, "n_val", cfg.data.n_val);
    read(d, "n_test", cfg.data.n_test);
    read(d, "dim", cfg.data.dim);
    read(d, "classes", cfg.data.n_classes);
    read(d, "attributes", cfg.data.n_attributes);
    read(d, "proportions", cfg.data.proportions);
    read(d, "class_margin", cfg.data.class_margin);
    read(d, "spurious_margin", cfg.data.spurious_margin);
    read(d, "noise", cfg.data.noise);
  }

  if (j.contains("erm"))
    cfg.erm = train_config_from_json(j.at("erm"), cfg.erm, "erm");

  if (j.contains("attack") && !j.at("attack").is_null()) {
    const json& a = j.at("attack");
    check_keys(a, {"kind", "fraction", "base_group", "target_class", "trigger", "gm"},
               "attack");
    AttackSpec spec;
    spec.kind = attack_kind_from_name(a.at("kind").get<std::string>());
    read(a, "fraction", spec.poison_fraction);
    if (a.contains("base_group"))
      spec.base_group = group_from_json(a.at("base_group"), "attack.base_group");
    else if (spec.kind == AttackKind::Gm)
      spec.base_group = GroupLabel{1, 0};  // craft from the smallest group
    read(a, "target_class", spec.target_class);
    if (a.contains("trigger")) {
      const json& t = a.at("trigger");
      check_keys(t, {"coordinates", "values", "magnitude"}, "attack.trigger");
      if (t.contains("magnitude")) {
        spec.trigger =
            TriggerPattern::make_default(cfg.data.dim, t.at("magnitude").get<double>());
      } else {
        read(t, "coordinates", spec.trigger.coordinates);
        read(t, "values", spec.trigger.values);
      }
    } else {
      spec.trigger = TriggerPattern::make_default(cfg.data.dim);
    }
    if (a.contains("gm")) {
      const json& g = a.at("gm");
      check_keys(g, {"epsilon", "restarts", "steps", "step_size", "n_targets"},
                 "attack.gm");
      read(g, "epsilon", spec.gm.epsilon);
      read(g, "restarts", spec.gm.restarts);
      read(g, "steps", spec.gm.steps);
      read(g, "step_size", spec.gm.step_size);
      read(g, "n_targets", spec.gm.n_targets);
    }
    if (spec.kind == AttackKind::Gm) spec.target_class = spec.base_group.class_label;
    cfg.attack = spec;
  }

  if (j.contains("method") && !j.at("method").is_null()) {
    const json& m = j.at("method");
    check_keys(m, {"kind", "jtt", "george"}, "method");
    const std::string kind = m.value("kind", std::string("none"));
    if (kind == "none") {
      cfg.method = MethodKind::None;
    } else if (kind == "jtt") {
      cfg.method = MethodKind::Jtt;
    } else if (kind == "george") {
      cfg.method = MethodKind::George;
    } else {
      throw ConfigError("unknown method kind: " + kind);
    }
    if (m.contains("jtt")) {
      const json& jt = m.at("jtt");
      check_keys(jt, {"early_stop", "upsampling", "identification", "final"},
                 "method.jtt");
      read(jt, "early_stop", cfg.jtt.early_stop_epochs);
      read(jt, "upsampling", cfg.jtt.upsampling_factor);
      if (jt.contains("identification"))
        cfg.jtt.identification = train_config_from_json(
            jt.at("identification"), cfg.jtt.identification, "method.jtt.identification");
      if (jt.contains("final"))
        cfg.jtt.final_phase =
            train_config_from_json(jt.at("final"), cfg.jtt.final_phase, "method.jtt.final");
    }
    if (m.contains("george")) {
      const json& ge = m.at("george");
      check_keys(ge, {"erm", "dro", "max_clusters", "dro_step_size"}, "method.george");
      if (ge.contains("erm"))
        cfg.george.erm =
            train_config_from_json(ge.at("erm"), cfg.george.erm, "method.george.erm");
      if (ge.contains("dro"))
        cfg.george.dro =
            train_config_from_json(ge.at("dro"), cfg.george.dro, "method.george.dro");
      read(ge, "max_clusters", cfg.george.max_clusters);
      read(ge, "dro_step_size", cfg.george.dro_step_size);
    }
  }

  if (j.contains("defense") && !j.at("defense").is_null()) {
    const json& d = j.at("defense");
    check_keys(d, {"kind", "epic", "strip"}, "defense");
    const std::string kind = d.value("kind", std::string("none"));
    if (kind == "none") {
      cfg.defense = DefenseKind::None;
    } else if (kind == "epic") {
      cfg.defense = DefenseKind::Epic;
    } else if (kind == "strip") {
      cfg.defense = DefenseKind::Strip;
    } else {
      throw ConfigError("unknown defense kind: " + kind);
    }
    if (d.contains("epic")) {
      const json& e = d.at("epic");
      check_keys(e,
                 {"warmup", "check_period", "medoid_fraction", "patience",
                  "stop_epoch", "radius_scale", "train"},
                 "defense.epic");
      read(e, "warmup", cfg.epic.warmup_epochs);
      read(e, "check_period", cfg.epic.check_period);
      read(e, "medoid_fraction", cfg.epic.medoid_fraction);
      read(e, "patience", cfg.epic.isolation_patience);
      if (e.contains("stop_epoch") && !e.at("stop_epoch").is_null())
        cfg.epic.stop_epoch = e.at("stop_epoch").get<int>();
      read(e, "radius_scale", cfg.epic.isolation_radius_scale);
      if (e.contains("train"))
        cfg.epic.train =
            train_config_from_json(e.at("train"), cfg.epic.train, "defense.epic.train");
    }
    if (d.contains("strip")) {
      const json& s = d.at("strip");
      check_keys(s, {"overlays", "blend_weight", "thresholds"}, "defense.strip");
      read(s, "overlays", cfg.strip.overlays);
      read(s, "blend_weight", cfg.strip.blend_weight);
      read(s, "thresholds", cfg.strip.thresholds);
    }
  }
  if (cfg.strip.thresholds.empty())
    cfg.strip = [&] {
      StripConfig filled = default_strip(cfg.data.n_classes);
      filled.overlays = cfg.strip.overlays;
      filled.blend_weight = cfg.strip.blend_weight;
      return filled;
    }();

  if (j.contains("federated") && !j.at("federated").is_null()) {
    const json& f = j.at("federated");
    check_keys(f,
               {"n_clients", "participation", "rounds", "local_epochs", "local",
                "aggregator", "partition", "minority_holder_fraction"},
               "federated");
    FLConfig fl;
    fl.local = default_erm();
    fl.local.learning_rate = 0.05;
    read(f, "n_clients", fl.n_clients);
    read(f, "participation", fl.participation);
    read(f, "rounds", fl.rounds);
    read(f, "local_epochs", fl.local_epochs);
    if (f.contains("local"))
      fl.local = train_config_from_json(f.at("local"), fl.local, "federated.local");
    if (f.contains("aggregator")) {
      const json& ag = f.at("aggregator");
      check_keys(ag, {"type", "trim_k", "keep_fraction", "keep_k", "rho"},
                 "federated.aggregator");
      fl.aggregator.type = aggregator_from_name(ag.value("type", std::string("fedavg")));
      read(ag, "trim_k", fl.aggregator.trim_k);
      read(ag, "keep_fraction", fl.aggregator.keep_fraction);
      if (ag.contains("keep_k") && !ag.at("keep_k").is_null())
        fl.aggregator.keep_k = ag.at("keep_k").get<int>();
      read(ag, "rho", fl.aggregator.momentum_rho);
    }
    if (f.contains("partition")) {
      const std::string p = f.at("partition").get<std::string>();
      if (p == "iid")
        fl.partition = PartitionMode::Iid;
      else if (p == "non_iid")
        fl.partition = PartitionMode::NonIid;
      else
        throw ConfigError("unknown partition mode: " + p);
    }
    read(f, "minority_holder_fraction", fl.minority_holder_fraction);
    cfg.federated = fl;
  }

  if (j.contains("intervention"))
    cfg.intervention = intervention_from_name(j.at("intervention").get<std::string>());

  if (j.contains("combined") && !j.at("combined").is_null()) {
    const json& c = j.at("combined");
    check_keys(c, {"stop_epoch", "ideal"}, "combined");
    cfg.combined.enabled = true;
    read(c, "stop_epoch", cfg.combined.stop_epoch);
    read(c, "ideal", cfg.combined.ideal);
  }

  cfg.validate();
  return cfg;
}

ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config parse failure in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

nlohmann::ordered_json config_to_json(const ScenarioConfig& cfg) {
  nlohmann::ordered_json j;
  j["name"] = cfg.name;
  j["data"] = {{"n_train", cfg.data.n_train},
               {"n_val", cfg.data.n_val},
               {"n_test", cfg.data.n_test},
               {"dim", cfg.data.dim},
               {"classes", cfg.data.n_classes},
               {"attributes", cfg.data.n_attributes},
               {"proportions", cfg.data.proportions},
               {"class_margin", cfg.data.class_margin},
               {"spurious_margin", cfg.data.spurious_margin},
               {"noise", cfg.data.noise}};
  if (cfg.attack) {
    j["attack"] = {{"kind", attack_kind_name(cfg.attack->kind)},
                   {"fraction", cfg.attack->poison_fraction},
                   {"base_group",
                    {{"class", cfg.attack->base_group.class_label},
                     {"attribute", cfg.attack->base_group.attribute}}},
                   {"target_class", cfg.attack->target_class},
                   {"trigger",
                    {{"coordinates", cfg.attack->trigger.coordinates},
                     {"values", cfg.attack->trigger.values}}},
                   {"gm",
                    {{"epsilon", cfg.attack->gm.epsilon},
                     {"restarts", cfg.attack->gm.restarts},
                     {"steps", cfg.attack->gm.steps},
                     {"step_size", cfg.attack->gm.step_size},
                     {"n_targets", cfg.attack->gm.n_targets}}}};
  } else {
    j["attack"] = nullptr;
  }
  j["erm"] = train_config_to_json(cfg.erm);
  j["method"] = {{"kind", cfg.method == MethodKind::None
                              ? "none"
                              : (cfg.method == MethodKind::Jtt ? "jtt" : "george")},
                 {"jtt",
                  {{"early_stop", cfg.jtt.early_stop_epochs},
                   {"upsampling", cfg.jtt.upsampling_factor},
                   {"identification", train_config_to_json(cfg.jtt.identification)},
                   {"final", train_config_to_json(cfg.jtt.final_phase)}}},
                 {"george",
                  {{"erm", train_config_to_json(cfg.george.erm)},
                   {"dro", train_config_to_json(cfg.george.dro)},
                   {"max_clusters", cfg.george.max_clusters},
                   {"dro_step_size", cfg.george.dro_step_size}}}};
  nlohmann::ordered_json epic = {{"warmup", cfg.epic.warmup_epochs},
                                 {"check_period", cfg.epic.check_period},
                                 {"medoid_fraction", cfg.epic.medoid_fraction},
                                 {"patience", cfg.epic.isolation_patience},
                                 {"radius_scale", cfg.epic.isolation_radius_scale},
                                 {"train", train_config_to_json(cfg.epic.train)}};
  epic["stop_epoch"] =
      cfg.epic.stop_epoch ? json(*cfg.epic.stop_epoch) : json(nullptr);
  j["defense"] = {{"kind", cfg.defense == DefenseKind::None
                               ? "none"
                               : (cfg.defense == DefenseKind::Epic ? "epic" : "strip")},
                  {"epic", std::move(epic)},
                  {"strip",
                   {{"overlays", cfg.strip.overlays},
                    {"blend_weight", cfg.strip.blend_weight},
                    {"thresholds", cfg.strip.thresholds}}}};
  if (cfg.federated) {
    nlohmann::ordered_json agg = {
        {"type", aggregator_name(cfg.federated->aggregator.type)},
        {"trim_k", cfg.federated->aggregator.trim_k},
        {"keep_fraction", cfg.federated->aggregator.keep_fraction},
        {"rho", cfg.federated->aggregator.momentum_rho}};
    agg["keep_k"] = cfg.federated->aggregator.keep_k
                        ? json(*cfg.federated->aggregator.keep_k)
                        : json(nullptr);
    j["federated"] = {
        {"n_clients", cfg.federated->n_clients},
        {"participation", cfg.federated->participation},
        {"rounds", cfg.federated->rounds},
        {"local_epochs", cfg.federated->local_epochs},
        {"local", train_config_to_json(cfg.federated->local)},
        {"aggregator", std::move(agg)},
        {"partition",
         cfg.federated->partition == PartitionMode::Iid ? "iid" : "non_iid"},
        {"minority_holder_fraction", cfg.federated->minority_holder_fraction}};
  } else {
    j["federated"] = nullptr;
  }
  j["intervention"] = intervention_name(cfg.intervention);
  if (cfg.combined.enabled)
    j["combined"] = {{"stop_epoch", cfg.combined.stop_epoch},
                     {"ideal", cfg.combined.ideal}};
  else
    j["combined"] = nullptr;
  j["repetitions"] = cfg.repetitions;
  j["seed"] = cfg.base_seed;
  return j;
}

std::uint64_t config_hash(const ScenarioConfig& cfg) {
  // Sorted-key serialization makes the hash order-independent; the display
  // name is excluded.
  json canonical = json::parse(config_to_json(cfg).dump());
  canonical.erase("name");
  const std::string dump = canonical.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

struct NamedGroups {
  std::vector<GroupLabel> minorities;  // ascending clean size: lrg1, lrg2, ...
  std::vector<GroupLabel> majorities;  // pooled as hrg
};

NamedGroups name_groups(const Dataset& train) {
  NamedGroups out;
  const GroupCounts counts = group_counts(train);
  const std::set<GroupLabel> minority = minority_groups(train, 0.5);
  for (const auto& [g, c] : counts.clean)
    (minority.count(g) ? out.minorities : out.majorities).push_back(g);
  std::sort(out.minorities.begin(), out.minorities.end(),
            [&](const GroupLabel& a, const GroupLabel& b) {
              return counts.clean.at(a) < counts.clean.at(b);
            });
  return out;
}

struct RunContext {
  Dataset clean_train;  // before the attack
  Dataset train;        // after the attack (== clean_train when none)
  Dataset val;
  Dataset test;
  std::optional<AttackSpec> attack;
  std::vector<Sample> gm_targets;
  int gm_adversarial_class = 0;
  std::vector<std::int64_t> poison_ids;
};

GroupSpec make_group_spec(const DataConfig& data, double poison_fraction) {
  GroupSpec spec = GroupSpec::make_default(data.dim, data.class_margin,
                                           data.spurious_margin, data.noise);
  spec.n_classes = data.n_classes;
  spec.n_attributes = data.n_attributes;
  double total = 0.0;
  for (double p : data.proportions) total += p;
  if (total <= 0.0) throw ConfigError("scenario: proportions sum to zero");
  spec.proportions = data.proportions;
  for (double& p : spec.proportions) p *= (1.0 - poison_fraction) / total;
  spec.poison_fraction = poison_fraction;
  return spec;
}

RunContext make_run_data(const ScenarioConfig& cfg, std::uint64_t run_seed) {
  RunContext ctx;
  const std::uint64_t data_seed = run_seed;
  const std::uint64_t attack_seed = run_seed ^ 1;

  const double pf = cfg.attack ? cfg.attack->poison_fraction : 0.0;
  const GroupSpec train_spec = make_group_spec(cfg.data, pf);
  const GroupSpec eval_spec = make_group_spec(cfg.data, 0.0);
  ctx.clean_train = generate_dataset(train_spec, static_cast<std::size_t>(cfg.data.n_train),
                                     mix_seed(data_seed, 0));
  ctx.val = generate_dataset(eval_spec, static_cast<std::size_t>(cfg.data.n_val),
                             mix_seed(data_seed, 1));
  ctx.test = generate_dataset(eval_spec, static_cast<std::size_t>(cfg.data.n_test),
                              mix_seed(data_seed, 2));

  if (!cfg.attack) {
    ctx.train = ctx.clean_train;
    return ctx;
  }
  AttackSpec spec = *cfg.attack;
  ctx.attack = spec;
  switch (spec.kind) {
    case AttackKind::Dlbd: {
      AttackResult res = craft_dlbd(ctx.clean_train, spec, attack_seed);
      ctx.train = std::move(res.poisoned);
      ctx.poison_ids = std::move(res.poison_ids);
      break;
    }
    case AttackKind::Sa: {
      AttackResult res = craft_sa(ctx.clean_train, spec, attack_seed);
      ctx.train = std::move(res.poisoned);
      ctx.poison_ids = std::move(res.poison_ids);
      break;
    }
    case AttackKind::Gm: {
      // Clean-label crafting against a surrogate trained on the clean set.
      TrainConfig surrogate_cfg = cfg.erm;
      surrogate_cfg.seed = mix_seed(attack_seed, 3);
      const ModelParams m0 = ModelParams::random_init(
          ctx.clean_train.dim, 32, ctx.clean_train.n_classes, mix_seed(attack_seed, 5));
      const ModelParams surrogate = train(m0, ctx.clean_train, surrogate_cfg).params;

      ctx.gm_adversarial_class = spec.base_group.class_label;
      const int target_true_class = 1 - ctx.gm_adversarial_class;
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ctx.test.size(); ++i)
        if (ctx.test.labels[i] == target_true_class) rows.push_back(i);
      if (rows.size() < static_cast<std::size_t>(spec.gm.n_targets))
        throw RunError("gm: not enough target candidates in the test set");
      auto rng = make_rng(attack_seed, 9);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(spec.gm.n_targets));
      std::sort(rows.begin(), rows.end());
      for (std::size_t r : rows) ctx.gm_targets.push_back(ctx.test.sample(r));

      AttackResult res = craft_gm(ctx.clean_train, spec, surrogate, ctx.gm_targets,
                                  ctx.gm_adversarial_class, attack_seed);
      ctx.train = std::move(res.poisoned);
      ctx.poison_ids = std::move(res.poison_ids);
      break;
    }
    case AttackKind::None:
      throw ConfigError("scenario: attack kind none");
  }
  return ctx;
}

void add_group_fractions(RunValues& values, const std::string& prefix,
                         const std::set<std::int64_t>& selected,
                         const RunContext& ctx, const NamedGroups& named) {
  const auto frac = [&](const std::vector<std::int64_t>& members) {
    const auto v = idnf(selected, members);
    return v ? *v : 0.0;
  };
  values[prefix + "_poisons"] = frac(ctx.poison_ids);
  for (std::size_t i = 0; i < named.minorities.size(); ++i)
    values[prefix + "_lrg" + std::to_string(i + 1)] =
        frac(ctx.train.member_ids(named.minorities[i]));
  std::vector<std::int64_t> hrg;
  for (const GroupLabel& g : named.majorities) {
    const auto ids = ctx.train.member_ids(g);
    hrg.insert(hrg.end(), ids.begin(), ids.end());
  }
  values[prefix + "_hrg"] = frac(hrg);
  for (const auto& [g, c] : group_counts(ctx.train).clean)
    values[prefix + "_" + group_name(g)] = frac(ctx.train.member_ids(g));
}

void add_asr(RunValues& values, const ScenarioConfig& cfg, const RunContext& ctx,
             const ModelParams& model, const ModelParams* clean_baseline) {
  if (!ctx.attack) return;
  switch (ctx.attack->kind) {
    case AttackKind::Dlbd: {
      const auto asr =
          asr_dlbd(model, ctx.test, ctx.attack->trigger, ctx.attack->target_class);
      values["asr"] = asr ? *asr : 0.0;
      break;
    }
    case AttackKind::Gm:
      values["asr"] = asr_gm(model, ctx.gm_targets, ctx.gm_adversarial_class);
      break;
    case AttackKind::Sa: {
      if (!clean_baseline) throw RunError("sa: missing clean baseline model");
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < ctx.test.size(); ++i)
        if (ctx.test.groups[i] == ctx.attack->base_group) rows.push_back(i);
      Dataset target;
      target.dim = ctx.test.dim;
      target.n_classes = ctx.test.n_classes;
      target.n_attributes = ctx.test.n_attributes;
      target.features.resize(static_cast<Eigen::Index>(rows.size()), ctx.test.dim);
      target.reserve(rows.size());
      Eigen::Index r = 0;
      for (std::size_t i : rows) {
        target.features.row(r++) = ctx.test.features.row(i);
        target.groups.push_back(ctx.test.groups[i]);
        target.labels.push_back(ctx.test.labels[i]);
        target.provenance.push_back(ctx.test.provenance[i]);
        target.ids.push_back(ctx.test.ids[i]);
        target.base_ids.push_back(ctx.test.base_ids[i]);
      }
      const auto asr = asr_sa(model, *clean_baseline, target);
      values["asr"] = asr ? *asr : 0.0;
      break;
    }
    case AttackKind::None:
      break;
  }
  (void)cfg;
}

struct RepetitionOutput {
  RunValues values;
  std::map<int, std::map<std::string, double>> elimination_curve;  // epoch -> series
  std::map<std::string, std::vector<double>> strip_curves;
};

// Trains one pipeline instance. When `on_clean` is set the attack result
// is ignored and the clean training set is used (SA baseline).
ModelParams train_pipeline(const ScenarioConfig& cfg, const RunContext& ctx,
                           std::uint64_t train_seed, bool on_clean,
                           RepetitionOutput* out, const NamedGroups& named) {
  const Dataset& train_ds = on_clean ? ctx.clean_train : ctx.train;
  switch (cfg.method) {
    case MethodKind::Jtt: {
      JTTConfig jtt_cfg = cfg.jtt;
      jtt_cfg.identification.seed = mix_seed(train_seed, 1);
      jtt_cfg.final_phase.seed = mix_seed(train_seed, 2);
      std::set<std::int64_t> excluded;
      if (cfg.combined.enabled && !on_clean) {
        if (cfg.combined.ideal) {
          excluded.insert(ctx.poison_ids.begin(), ctx.poison_ids.end());
        } else if (cfg.combined.stop_epoch > 0) {
          EpicConfig epic_cfg = cfg.epic;
          epic_cfg.train.seed = mix_seed(train_seed, 5);
          epic_cfg.stop_epoch = cfg.combined.stop_epoch;
          const EpicResult epic_res =
              epic_train(train_ds, epic_cfg, Intervention::Standard, nullptr);
          excluded = epic_res.flagged_any;
        }
      }
      const JTTResult res = jtt_train(train_ds, ctx.val, jtt_cfg, cfg.intervention,
                                      excluded.empty() ? nullptr : &excluded);
      if (out && !on_clean)
        add_group_fractions(out->values, "idnf", res.used.ids, ctx, named);
      return res.params;
    }
    case MethodKind::George: {
      GeorgeConfig geo = cfg.george;
      geo.erm.seed = mix_seed(train_seed, 3);
      geo.dro.seed = mix_seed(train_seed, 4);
      geo.cluster_seed = mix_seed(train_seed, 7);
      const GeorgeResult res = george_train(train_ds, ctx.val, geo, cfg.intervention);
      if (out && !on_clean)
        add_group_fractions(out->values, "idnf", res.amplified, ctx, named);
      return res.params;
    }
    case MethodKind::None:
      break;
  }
  if (cfg.defense == DefenseKind::Epic && !cfg.combined.enabled) {
    EpicConfig epic_cfg = cfg.epic;
    epic_cfg.train.seed = mix_seed(train_seed, 5);
    const EpicResult res = epic_train(train_ds, epic_cfg, cfg.intervention, &ctx.val);
    if (out && !on_clean) {
      add_group_fractions(out->values, "elmf", res.log.all_eliminated(), ctx, named);
      for (const auto& [epoch, records] : res.log.by_epoch) {
        (void)records;
        const std::set<std::int64_t> through = res.log.eliminated_through(epoch);
        auto& row = out->elimination_curve[epoch];
        const auto frac = [&](const std::vector<std::int64_t>& members) {
          const auto v = elmf(through, members);
          return v ? *v : 0.0;
        };
        row["elmf_poisons"] = frac(ctx.poison_ids);
        for (std::size_t i = 0; i < named.minorities.size(); ++i)
          row["elmf_lrg" + std::to_string(i + 1)] =
              frac(ctx.train.member_ids(named.minorities[i]));
        std::vector<std::int64_t> hrg;
        for (const GroupLabel& g : named.majorities) {
          const auto ids = ctx.train.member_ids(g);
          hrg.insert(hrg.end(), ids.begin(), ids.end());
        }
        row["elmf_hrg"] = frac(hrg);
      }
    }
    return res.params;
  }
  // Plain ERM.
  TrainConfig erm_cfg = cfg.erm;
  erm_cfg.seed = mix_seed(train_seed, 6);
  const ModelParams m0 = ModelParams::random_init(train_ds.dim, 32, train_ds.n_classes,
                                                  mix_seed(train_seed, 8));
  return train(m0, train_ds, erm_cfg, nullptr, &ctx.val).params;
}

RepetitionOutput run_repetition(const ScenarioConfig& cfg, std::uint64_t run_seed) {
  RepetitionOutput out;
  const RunContext ctx = make_run_data(cfg, run_seed);
  const std::uint64_t train_seed = run_seed ^ 2;
  const NamedGroups named = name_groups(ctx.train);

  if (cfg.federated) {
    FLConfig fl = *cfg.federated;
    fl.local.seed = mix_seed(train_seed, 10);
    const FLExperimentResult res = run_fl_experiment(
        ctx.train, ctx.test, fl, ctx.attack ? &*ctx.attack : nullptr,
        mix_seed(train_seed, 11));
    out.values["acc"] = res.defended_acc;
    out.values["wga"] = res.defended_wga;
    out.values["wga_drop"] = res.wga_drop;
    out.values["acc_drop"] = res.acc_drop;
    add_asr(out.values, cfg, ctx, res.defended.params, nullptr);
    return out;
  }

  std::optional<ModelParams> clean_baseline;
  if (ctx.attack && ctx.attack->kind == AttackKind::Sa)
    clean_baseline = train_pipeline(cfg, ctx, train_seed, true, nullptr, named);

  const ModelParams model =
      train_pipeline(cfg, ctx, train_seed, false, &out, named);

  const EvalResult eval = evaluate(model, ctx.test);
  out.values["acc"] = eval.overall_accuracy;
  out.values["wga"] = wga(eval);
  add_asr(out.values, cfg, ctx, model,
          clean_baseline ? &*clean_baseline : nullptr);

  if (cfg.defense == DefenseKind::Strip) {
    std::map<std::string, Eigen::MatrixXd> groups;
    for (const auto& [g, count] : group_counts(ctx.test).clean) {
      Eigen::MatrixXd rows(count, ctx.test.dim);
      Eigen::Index r = 0;
      for (std::size_t i = 0; i < ctx.test.size(); ++i)
        if (ctx.test.groups[i] == g) rows.row(r++) = ctx.test.features.row(i);
      groups[group_name(g)] = std::move(rows);
    }
    Eigen::MatrixXd triggered = ctx.test.features;
    for (std::size_t i = 0; i < ctx.attack->trigger.coordinates.size(); ++i)
      triggered.col(ctx.attack->trigger.coordinates[i])
          .setConstant(ctx.attack->trigger.values[i]);
    groups["triggered"] = std::move(triggered);
    out.strip_curves = strip_sweep(model, groups, ctx.val.features, cfg.strip,
                                   mix_seed(train_seed, 12));
  }
  return out;
}

ResultRecord finalize_record(const ScenarioConfig& cfg,
                             const std::vector<RepetitionOutput>& reps,
                             double wall_seconds) {
  ResultRecord record;
  record.scenario = cfg.name;
  record.config_hash = config_hash(cfg);
  record.wall_seconds = wall_seconds;
  for (const auto& rep : reps) record.raw_runs.push_back(rep.values);
  record.report = aggregate_runs(record.raw_runs);

  // Elimination curves: mean over repetitions at each known check epoch,
  // carrying each repetition's last value forward.
  std::set<int> epochs;
  std::set<std::string> series;
  for (const auto& rep : reps)
    for (const auto& [epoch, row] : rep.elimination_curve) {
      epochs.insert(epoch);
      for (const auto& [name, v] : row) series.insert(name);
    }
  for (int epoch : epochs) {
    for (const std::string& name : series) {
      double sum = 0.0;
      for (const auto& rep : reps) {
        double last = 0.0;
        for (const auto& [e, row] : rep.elimination_curve) {
          if (e > epoch) break;
          auto it = row.find(name);
          if (it != row.end()) last = it->second;
        }
        sum += last;
      }
      record.plot_rows.push_back(
          {static_cast<double>(epoch), name, sum / static_cast<double>(reps.size())});
    }
  }

  if (!reps.empty() && !reps.front().strip_curves.empty()) {
    for (const auto& [name, curve] : reps.front().strip_curves) {
      for (std::size_t t = 0; t < curve.size(); ++t) {
        double sum = 0.0;
        for (const auto& rep : reps) sum += rep.strip_curves.at(name)[t];
        record.plot_rows.push_back({cfg.strip.thresholds[t], "strip_" + name,
                                    sum / static_cast<double>(reps.size())});
      }
    }
  }
  return record;
}

}  // namespace

ResultRecord run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();

  std::vector<RepetitionOutput> reps;
  std::vector<std::string> failures;
  for (int i = 0; i < cfg.repetitions; ++i) {
    const std::uint64_t run_seed = cfg.base_seed + static_cast<std::uint64_t>(i);
    try {
      reps.push_back(run_repetition(cfg, run_seed));
    } catch (const std::exception& e) {
      failures.push_back("run " + std::to_string(i) + ": " + e.what());
    }
  }
  if (reps.empty()) {
    std::string detail;
    for (const auto& f : failures) detail += "\n  " + f;
    throw RunError("scenario '" + cfg.name + "' failed in every repetition:" + detail);
  }
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return finalize_record(cfg, reps, wall);
}

ResultRecord run_combined(const ScenarioConfig& cfg) {
  if (!cfg.combined.enabled)
    throw ConfigError("run_combined: combined mode not configured");
  return run_scenario(cfg);
}

std::vector<ResultRecord> run_sweep(const ScenarioConfig& base, const std::string& axis,
                                    const std::vector<std::string>& values) {
  const auto as_double = [](const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("sweep: cannot parse value '" + v + "'");
    }
  };
  const auto as_int = [&](const std::string& v) {
    const double d = as_double(v);
    if (d != std::floor(d)) throw ConfigError("sweep: expected integer, got " + v);
    return static_cast<int>(d);
  };

  std::vector<ResultRecord> records;
  for (const std::string& value : values) {
    ScenarioConfig cfg = base;
    if (axis == "early_stop") {
      cfg.jtt.early_stop_epochs = as_int(value);
    } else if (axis == "upsampling") {
      cfg.jtt.upsampling_factor = as_int(value);
    } else if (axis == "poison_fraction") {
      if (!cfg.attack) throw ConfigError("sweep: poison_fraction needs an attack");
      cfg.attack->poison_fraction = as_double(value);
    } else if (axis == "trigger_magnitude") {
      if (!cfg.attack) throw ConfigError("sweep: trigger_magnitude needs an attack");
      cfg.attack->trigger = TriggerPattern::make_default(cfg.data.dim, as_double(value));
    } else if (axis == "gm_targets") {
      if (!cfg.attack) throw ConfigError("sweep: gm_targets needs an attack");
      cfg.attack->gm.n_targets = as_int(value);
    } else if (axis == "aggregator") {
      if (!cfg.federated) throw ConfigError("sweep: aggregator needs federated mode");
      cfg.federated->aggregator.type = aggregator_from_name(value);
    } else if (axis == "stop_epoch") {
      if (cfg.combined.enabled)
        cfg.combined.stop_epoch = as_int(value);
      else if (cfg.defense == DefenseKind::Epic)
        cfg.epic.stop_epoch = as_int(value);
      else
        throw ConfigError("sweep: stop_epoch needs epic or combined mode");
    } else {
      throw ConfigError("sweep: unknown axis '" + axis + "'");
    }
    cfg.name = base.name + "[" + axis + "=" + value + "]";
    records.push_back(run_scenario(cfg));
  }
  return records;
}

EmitFormat emit_format_from_name(const std::string& name) {
  if (name == "csv") return EmitFormat::Csv;
  if (name == "json") return EmitFormat::Json;
  if (name == "plot") return EmitFormat::PlotData;
  throw ConfigError("unknown emit format: " + name);
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
               ? c
               : '_';
  return out;
}

}  // namespace

const std::vector<std::string>& summary_csv_columns() {
  static const std::vector<std::string> columns = [] {
    std::vector<std::string> cols{"scenario", "config_hash", "n_runs"};
    for (const char* metric :
         {"acc", "wga", "asr", "idnf_poisons", "idnf_lrg1", "idnf_lrg2", "idnf_hrg",
          "elmf_poisons", "elmf_lrg1", "elmf_lrg2", "elmf_hrg", "wga_drop",
          "acc_drop"}) {
      cols.push_back(std::string(metric) + "_mean");
      cols.push_back(std::string(metric) + "_std");
    }
    return cols;
  }();
  return columns;
}

std::string records_to_csv(const std::vector<ResultRecord>& records) {
  std::ostringstream out;
  const auto& cols = summary_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i)
    out << cols[i] << (i + 1 < cols.size() ? "," : "\n");
  for (const auto& record : records) {
    out << record.scenario << ',' << record.config_hash << ','
        << (record.raw_runs.empty() ? 0 : static_cast<int>(record.raw_runs.size()));
    for (std::size_t i = 3; i < cols.size(); i += 2) {
      const std::string metric = cols[i].substr(0, cols[i].size() - 5);  // strip _mean
      auto it = record.report.find(metric);
      if (it == record.report.end()) {
        out << ",,";
      } else {
        out << ',' << format_double(it->second.mean) << ','
            << format_double(it->second.stddev);
      }
    }
    out << '\n';
  }
  return out.str();
}

std::vector<std::string> emit(const std::vector<ResultRecord>& records,
                              EmitFormat format, const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw RunError("emit: cannot create output directory " + out_dir);

  std::vector<std::string> written;
  const auto write_file = [&](const std::string& name, const std::string& body) {
    const std::string path = (fs::path(out_dir) / name).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw RunError("emit: cannot write " + path);
    out << body;
    written.push_back(path);
  };

  switch (format) {
    case EmitFormat::Csv:
      write_file("results.csv", records_to_csv(records));
      break;
    case EmitFormat::Json: {
      nlohmann::ordered_json all = nlohmann::ordered_json::array();
      for (const auto& record : records) {
        nlohmann::ordered_json j;
        j["scenario"] = record.scenario;
        j["config_hash"] = record.config_hash;
        j["report"] = report_to_json(record.report);
        nlohmann::ordered_json raw = nlohmann::ordered_json::array();
        for (const auto& run : record.raw_runs) {
          nlohmann::ordered_json row;
          for (const auto& [k, v] : run) row[k] = v;
          raw.push_back(std::move(row));
        }
        j["runs"] = std::move(raw);
        j["wall_seconds"] = record.wall_seconds;
        all.push_back(std::move(j));
      }
      write_file("results.json", all.dump(2) + "\n");
      break;
    }
    case EmitFormat::PlotData: {
      for (const auto& record : records) {
        std::ostringstream body;
        body << "x,series,y\n";
        for (const auto& row : record.plot_rows)
          body << format_double(row.x) << ',' << row.series << ','
               << format_double(row.y) << '\n';
        write_file(sanitize(record.scenario) + "_plot.csv", body.str());
      }
      break;
    }
  }
  return written;
}

}  // namespace tension

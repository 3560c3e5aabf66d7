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
// Scenario orchestration: JSON-configured composition of data, attack,
// method, defense and intervention; repetition management with derived
// seeds; parameter sweeps; the staged defense-then-amplification
// pipeline; CSV/JSON/plot-data persistence.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tension/attacks.hpp"
#include "tension/defenses.hpp"
#include "tension/federated.hpp"
#include "tension/group_robust.hpp"
#include "tension/metrics.hpp"
#include "tension/model.hpp"
#include "tension/synth_data.hpp"
#include "tension/theory.hpp"

namespace tension {

struct DataConfig {
  int n_train = 5000;
  int n_val = 1000;
  int n_test = 2000;
  int dim = 20;
  int n_classes = 2;
  int n_attributes = 2;
  std::vector<double> proportions{0.72, 0.038, 0.012, 0.22};  // relative weights
  double class_margin = 2.0;
  double spurious_margin = 3.0;
  double noise = 1.0;
};

enum class MethodKind { None, Jtt, George };
enum class DefenseKind { None, Epic, Strip };

struct CombinedConfig {
  bool enabled = false;
  int stop_epoch = 0;   // 0 => plain amplification run
  bool ideal = false;   // exclude exactly the poison ids instead
};

struct ScenarioConfig {
  std::string name = "scenario";
  DataConfig data;
  std::optional<AttackSpec> attack;
  TrainConfig erm;  // plain runs and the gradient-matching surrogate
  MethodKind method = MethodKind::None;
  JTTConfig jtt;
  GeorgeConfig george;
  DefenseKind defense = DefenseKind::None;
  EpicConfig epic;
  StripConfig strip;
  std::optional<FLConfig> federated;
  Intervention intervention = Intervention::Standard;
  CombinedConfig combined;
  int repetitions = 3;
  std::uint64_t base_seed = 1;

  void validate() const;
};

ScenarioConfig load_config(const std::string& path);
ScenarioConfig config_from_json(const nlohmann::json& j);
// Canonical form with every default filled in.
nlohmann::ordered_json config_to_json(const ScenarioConfig& cfg);
// FNV-1a over the canonical serialization minus the display name.
std::uint64_t config_hash(const ScenarioConfig& cfg);

struct PlotRow {
  double x = 0.0;
  std::string series;
  double y = 0.0;
};

struct ResultRecord {
  std::string scenario;
  std::uint64_t config_hash = 0;
  MetricsReport report;
  std::vector<RunValues> raw_runs;
  double wall_seconds = 0.0;
  std::vector<PlotRow> plot_rows;
};

// Runs `repetitions` independent repetitions with seeds base, base+1, ...
// Each repetition derives its data/attack/training streams as
// (run_seed, run_seed^1, run_seed^2). Per-run failures are recorded; the
// scenario fails only if every repetition fails.
ResultRecord run_scenario(const ScenarioConfig& cfg);

// Staged pipeline: the iterative defense runs up to the stop epoch to
// collect potential-poison ids, which are then excluded from the
// amplification set of the upweighting method.
ResultRecord run_combined(const ScenarioConfig& cfg);

// One scenario per value along a named axis (early_stop, upsampling,
// poison_fraction, trigger_magnitude, gm_targets, aggregator, stop_epoch).
std::vector<ResultRecord> run_sweep(const ScenarioConfig& base, const std::string& axis,
                                    const std::vector<std::string>& values);

enum class EmitFormat { Csv, Json, PlotData };

EmitFormat emit_format_from_name(const std::string& name);

// Writes records under out_dir; returns the created file paths.
// CSV: one aggregate row per scenario, fixed column order.
// JSON: full records. PlotData: long-format (x, series, y) per scenario.
std::vector<std::string> emit(const std::vector<ResultRecord>& records,
                              EmitFormat format, const std::string& out_dir);

// Fixed CSV header/column order shared by emit and the docs.
const std::vector<std::string>& summary_csv_columns();
std::string records_to_csv(const std::vector<ResultRecord>& records);

}  // namespace tension

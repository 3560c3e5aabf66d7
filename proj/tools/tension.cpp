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
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "tension/runner.hpp"
#include "tension/theory.hpp"

namespace {

std::vector<std::string> split_values(const std::string& csv) {
  std::vector<std::string> out;
  std::string item;
  for (char c : csv) {
    if (c == ',') {
      out.push_back(item);
      item.clear();
    } else {
      item += c;
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  // The only environment knob: worker threads for Eigen's internals.
  if (const char* threads = std::getenv("TENSION_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));

  CLI::App app{"group robustness / data poisoning tension simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::string format = "csv";
  std::string sweep_arg;
  bool combined_flag = false;
  std::uint64_t seed_override = 0;

  CLI::App* run = app.add_subcommand("run", "run the scenario in a config file");
  run->add_option("config", config_path, "scenario JSON document")->required();
  run->add_option("--out", out_dir, "output directory");
  run->add_option("--format", format, "csv|json|plot");
  run->add_option("--sweep", sweep_arg, "AXIS=v1,v2,... parameter sweep");
  run->add_flag("--combined", combined_flag, "force the staged defense+method pipeline");
  run->add_option("--seed", seed_override, "override the base seed");

  std::string th_out = "out";
  std::string th_eps = "0.05,0.1,0.2,0.4";
  double th_mu_c = 0.7, th_mu_p = 0.3;
  std::size_t th_n = 1000000;
  std::uint64_t th_seed = 1;
  std::string th_family = "beta";
  CLI::App* verify = app.add_subcommand(
      "verify-theorem", "check the loss-separation bound on an epsilon grid");
  verify->add_option("--out", th_out, "output directory");
  verify->add_option("--eps", th_eps, "comma-separated epsilon grid");
  verify->add_option("--mu-c", th_mu_c, "clean-group mean class probability");
  verify->add_option("--mu-p", th_mu_p, "poison mean class probability");
  verify->add_option("--n", th_n, "Monte Carlo samples per grid point");
  verify->add_option("--seed", th_seed, "master seed");
  verify->add_option("--family", th_family, "beta|truncated_gaussian");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (run->parsed()) {
      tension::ScenarioConfig cfg = tension::load_config(config_path);
      if (run->count("--seed") > 0) cfg.base_seed = seed_override;
      if (combined_flag) {
        cfg.combined.enabled = true;
        cfg.validate();
      }

      std::vector<tension::ResultRecord> records;
      if (!sweep_arg.empty()) {
        const auto eq = sweep_arg.find('=');
        if (eq == std::string::npos)
          throw tension::ConfigError("--sweep expects AXIS=v1,v2,...");
        records = tension::run_sweep(cfg, sweep_arg.substr(0, eq),
                                     split_values(sweep_arg.substr(eq + 1)));
      } else if (cfg.combined.enabled) {
        records.push_back(tension::run_combined(cfg));
      } else {
        records.push_back(tension::run_scenario(cfg));
      }
      const auto written = tension::emit(
          records, tension::emit_format_from_name(format), out_dir);
      for (const auto& path : written) std::cout << path << "\n";
      return 0;
    }

    if (verify->parsed()) {
      tension::TheoremCheckConfig cfg;
      cfg.epsilons.clear();
      for (const std::string& v : split_values(th_eps))
        cfg.epsilons.push_back(std::stod(v));
      cfg.mu_c = th_mu_c;
      cfg.mu_p = th_mu_p;
      cfg.n_samples = th_n;
      cfg.seed = th_seed;
      if (th_family == "beta")
        cfg.family = tension::ProbFamily::Beta;
      else if (th_family == "truncated_gaussian")
        cfg.family = tension::ProbFamily::TruncatedGaussian;
      else
        throw tension::ConfigError("unknown family: " + th_family);

      const auto points = tension::verify_theorem1(cfg);
      std::filesystem::create_directories(th_out);
      const std::string path =
          (std::filesystem::path(th_out) / "theorem_report.csv").string();
      std::ofstream out(path, std::ios::binary);
      if (!out) throw tension::RunError("cannot write " + path);
      out << tension::theorem_report_csv(points);
      std::cout << path << "\n";
      bool all_pass = true;
      for (const auto& p : points) all_pass &= (p.pass || p.skipped);
      return all_pass ? 0 : 3;
    }
  } catch (const tension::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "run failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

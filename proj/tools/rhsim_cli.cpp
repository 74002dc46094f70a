// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "rhsim/scenario.hpp"

int main(int argc, char** argv) {
  CLI::App app{"GPU page-table Rowhammer simulator"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run one scenario and write its artifacts");
  std::string scenario, config_path, out;
  std::uint64_t seed = 0;
  std::uint32_t trials = 0, jobs = 0;
  double race_window = -1;
  std::vector<std::string> overrides;
  run->add_option("scenario", scenario, "Scenario name")
      ->required()
      ->check(CLI::IsMember(rhsim::kScenarios));
  run->add_option("-c,--config", config_path, "key = value config file");
  auto* seed_opt = run->add_option("-s,--seed", seed, "Base RNG seed");
  run->add_option("-o,--out", out, "Output directory");
  run->add_option("-t,--trials", trials, "Number of seeds to run");
  run->add_option("-j,--jobs", jobs, "Worker threads for trials");
  run->add_option("--race-window", race_window, "Driver race probability per enqueue");
  run->add_option("--set", overrides, "Extra key=value override (repeatable)");

  app.add_subcommand("list", "List scenarios")->callback([] {
    for (const auto& s : rhsim::kScenarios) std::cout << s << "\n";
  });

  CLI11_PARSE(app, argc, argv);
  if (!*run) return 0;

  rhsim::ScenarioConfig cfg;
  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw rhsim::ConfigError("cannot read " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      cfg = rhsim::parse_config(ss.str(), cfg);
    }
    cfg.set("scenario", scenario);
    if (*seed_opt) cfg.set("seed", std::to_string(seed));
    if (!out.empty()) cfg.set("out", out);
    if (trials) cfg.set("trials", std::to_string(trials));
    if (jobs) cfg.set("jobs", std::to_string(jobs));
    if (race_window >= 0) cfg.set("race_window", std::to_string(race_window));
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw rhsim::ConfigError("--set expects key=value: " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    // Validates geometry before any work starts.
    (void)cfg.geometry();
  } catch (const rhsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  rhsim::ScenarioResult r;
  try {
    r = rhsim::run_trials(cfg);
  } catch (const rhsim::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  rhsim::write_artifacts(r, cfg.out);
  std::cout << cfg.scenario << " seed=" << cfg.seed << " trials=" << cfg.trials
            << (r.ok ? " PASS" : " FAIL") << " -> " << cfg.out << "\n";
  return r.ok ? 0 : 1;
}

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rhsim/attack_engine.hpp"
#include "rhsim/host_driver.hpp"

namespace rhsim {

inline const std::vector<std::string> kScenarios = {
    "massage-demo", "e2e-attack", "host-privesc", "code-tamper",
    "key-race",     "fingerprint", "eq1-trace"};

struct ScenarioConfig {
  std::string scenario;
  std::uint64_t capacity_gib = 48;
  std::uint32_t banks = 16;
  std::uint32_t row_size = 2048;
  std::string profile;  // path to a fault profile; empty selects the built-in one
  double timing_base = 1.0;
  double timing_penalty = 99.0;
  double timing_jitter = 0.0;
  std::uint64_t seed = 7;
  std::string out = "out";
  std::uint32_t victim_percent = 8;
  std::string site;
  std::uint32_t max_step3_retries = 16;
  double spike_factor = 10.0;
  std::uint32_t frame_reads = 1000;
  std::uint32_t periods = 12;
  double race_window = 0.0;
  std::uint32_t race_candidates = 100;
  double race_dump_ms = 0.2;
  double race_residency_ms = 0.6;
  std::uint64_t race_trials = 100000;
  std::uint32_t tamper_positions = 50;
  std::uint32_t trials = 1;
  std::uint32_t jobs = 1;

  /// Sets one key; unknown keys and malformed values raise ConfigError.
  void set(const std::string& key, const std::string& value);
  [[nodiscard]] std::map<std::string, std::string> echo() const;
  [[nodiscard]] Geometry geometry() const;
  [[nodiscard]] TimingModel timing() const;
};

/// Flat `key = value` lines; `#` starts a comment.
[[nodiscard]] ScenarioConfig parse_config(const std::string& text, ScenarioConfig base = {});

struct ScenarioResult {
  bool ok = false;
  nlohmann::ordered_json report;
  std::string latency_csv;
  std::string events_jsonl;
  std::map<std::string, std::string> extra;  // file name -> contents
};

/// One simulated machine: a pinned victim and an attacker context.
struct World {
  std::unique_ptr<Gpu> gpu;
  std::uint32_t victim_ctx = 0;
  std::uint32_t attacker_ctx = 0;
  std::unique_ptr<GuestSession> victim;
  std::unique_ptr<GuestSession> attacker;
  std::uint64_t victim_va = 0;
  std::uint64_t victim_bytes = 0;
  std::unique_ptr<HostSystem> host;
};

[[nodiscard]] World make_world(const ScenarioConfig& cfg, std::uint64_t seed, bool with_host = false);

/// Ground-truth chance that one reshuffle lands the site entry on a group
/// whose flipped twin is an attacker-tagged slice. Read at Step-3 start.
[[nodiscard]] double step3_destination_p(Gpu& gpu, std::uint32_t ctx, const ProfileHit& site,
                                         std::size_t groups = 8192);

struct FrameCheck {
  std::uint32_t reads = 0;
  std::uint32_t mismatches = 0;
  std::uint32_t violations = 0;
};

/// Reads random frames through the handle and compares each batch with
/// device memory right after it was read.
[[nodiscard]] FrameCheck check_random_frames(Gpu& gpu, ArbitraryRW& rw, std::uint32_t count,
                                             std::uint64_t seed);

/// Writes through the handle into the victim's buffer and reads it back as
/// the victim. Returns true when the victim sees the tamper.
[[nodiscard]] bool victim_tamper_visible(World& w, ArbitraryRW& rw);

[[nodiscard]] ScenarioResult run_scenario(const ScenarioConfig& cfg);
/// Runs `cfg.trials` seeds on `cfg.jobs` threads and aggregates.
[[nodiscard]] ScenarioResult run_trials(const ScenarioConfig& cfg);
void write_artifacts(const ScenarioResult& r, const std::string& dir);

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rhsim/uvm_allocator.hpp"

namespace rhsim {

struct TimingModel {
  double base = 1.0;
  double eviction_penalty = 99.0;
  double jitter = 0.0;  // relative half-width of a uniform perturbation
};

/// Receives the firmware messages a device-attribute query produces.
class GspProducer {
 public:
  virtual ~GspProducer() = default;
  virtual void device_attribute_query() = 0;
};

struct AuditRecord {
  std::uint64_t tick;
  std::uint32_t ctx;
  std::string op;
  std::uint64_t digest;
  double latency;
};

/// What offline profiling of the session's own memory revealed: three of
/// its 2 MiB pages stacked on consecutive frames, the middle one holding a
/// flippable cell at `offset`.
struct ProfileHit {
  std::size_t site_index;
  std::string label;
  std::uint64_t victim_va;
  std::uint64_t low_va;
  std::uint64_t high_va;
  std::uint64_t offset;  // byte offset of the cell inside the 2 MiB frame
  std::uint32_t bank;
  int pte_bit;
  FlipDirection direction;
};

/// Everything a user context may do. Each call is audited and priced by
/// the timing model.
class GuestSession {
 public:
  GuestSession(Gpu& gpu, std::uint32_t ctx, std::uint64_t seed, TimingModel timing = {},
               GspProducer* gsp = nullptr);

  [[nodiscard]] std::uint32_t ctx() const { return ctx_; }

  std::uint64_t uvm_alloc(std::uint64_t size);
  std::uint64_t device_alloc(std::uint64_t size);
  double timed_touch(std::uint64_t va, std::uint64_t len);
  double cpu_touch(std::uint64_t va, std::uint64_t len);
  void free(std::uint64_t va);

  void write_data(std::uint64_t va, std::span<const std::uint8_t> bytes);
  std::vector<std::uint8_t> read_data(std::uint64_t va, std::uint64_t len);
  std::uint64_t read_u64(std::uint64_t va);
  void write_u64(std::uint64_t va, std::uint64_t v);

  /// Batched 8-byte reads; a faulting address yields an empty slot.
  std::vector<std::optional<std::uint64_t>> gather_u64(std::span<const std::uint64_t> vas);
  /// Batched 8-byte writes; returns how many landed.
  std::size_t scatter_u64(std::span<const std::pair<std::uint64_t, std::uint64_t>> writes);
  /// Streams one word from each address, faults ignored. Used to push
  /// translations out of the TLB.
  double stream_read(std::span<const std::uint64_t> vas);

  double hammer_own(std::span<const std::uint64_t> vas);
  double device_attribute_query();
  std::uint64_t mem_get_info();
  std::vector<ProfileHit> profile_lookup();

  [[nodiscard]] const std::vector<AuditRecord>& audit() const { return audit_; }
  [[nodiscard]] double last_latency() const { return last_latency_; }
  [[nodiscard]] double total_latency() const { return total_latency_; }
  [[nodiscard]] const TimingModel& timing() const { return timing_; }

 private:
  double price(std::uint32_t evictions);
  void log(const char* op, std::uint64_t digest, double latency);

  Gpu& gpu_;
  std::uint32_t ctx_;
  TimingModel timing_;
  GspProducer* gsp_;
  std::mt19937_64 rng_;
  std::vector<AuditRecord> audit_;
  double last_latency_ = 0;
  double total_latency_ = 0;
};

/// Latency-trace rows `tick,ctx,op,latency` of several sessions, by tick.
[[nodiscard]] std::string latency_csv(const std::vector<const GuestSession*>& sessions);

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rhsim/guest_api.hpp"

namespace rhsim {

inline constexpr std::uint64_t kTagMagic = 0xA77Aull << 48;
[[nodiscard]] inline std::uint64_t va_tag(std::uint64_t va) { return kTagMagic | (va >> 16); }
[[nodiscard]] inline bool is_tag(std::uint64_t v) { return (v >> 48) == 0xA77A; }
[[nodiscard]] inline std::uint64_t tag_va(std::uint64_t v) {
  return (v & ((std::uint64_t{1} << 48) - 1)) << 16;
}

struct AttackConfig {
  Geometry geometry;  // device facts an attacker learns by reverse engineering
  double spike_factor = 10.0;
  std::uint32_t max_step3_retries = 16;
  std::uint32_t max_step4_failures = 6;
  std::uint32_t keepalive_period = 64;
  std::uint32_t reshuffle_slices = 1024;
  std::uint32_t thrash_pages = 32768;
  std::uint32_t dense_pages = 8192;
  std::uint64_t seed = 7;
  std::string site_label;        // empty: seeded choice among usable sites
  bool open_target_hole = true;  // false: control run that never frees the target
};

enum class Phase : std::uint8_t { fill, massage, hammer_scan, remassage, escalated, failed };
[[nodiscard]] const char* phase_name(Phase p);

enum class ScanKind : std::uint8_t { no_flip, foreign_destination, own_destination };
[[nodiscard]] const char* scan_name(ScanKind k);

struct ScanOutcome {
  ScanKind kind = ScanKind::no_flip;
  std::uint64_t corrupted_va = 0;
  std::uint64_t destination_va = 0;
};

struct AttackState {
  Phase phase = Phase::fill;
  std::optional<std::uint64_t> corrupted_va;
  std::optional<std::uint64_t> destination_va;
  std::uint32_t retries = 0;
};

/// GPU-wide read/write through leaf entries the attacker can edit.
class ArbitraryRW {
 public:
  struct Window {
    std::uint64_t window_va;   // VA whose entry is attacker controlled
    std::uint64_t control_va;  // VA mapping the table page holding that entry
    std::uint64_t original;    // entry value the driver wrote
  };

  ArbitraryRW(GuestSession& g, std::vector<Window> windows, std::vector<std::uint64_t> thrash);

  [[nodiscard]] const std::vector<Window>& windows() const { return windows_; }
  void set_entry(std::size_t w, std::uint64_t raw);
  std::uint64_t entry(std::size_t w);
  void thrash();

  /// Reads the whole 4 KiB frames at the given physical addresses, remapping
  /// up to one frame per window between TLB flushes.
  std::vector<std::vector<std::uint8_t>> read_frames(std::span<const std::uint64_t> frame_addrs);
  std::vector<std::uint8_t> read_phys(std::uint64_t phys, std::uint64_t len);
  void write_phys(std::uint64_t phys, std::span<const std::uint8_t> data);
  void restore();

  [[nodiscard]] std::uint64_t thrash_count() const { return thrashes_; }
  [[nodiscard]] GuestSession& session() { return g_; }

 private:
  GuestSession& g_;
  std::vector<Window> windows_;
  std::vector<std::uint64_t> thrash_;
  std::uint64_t thrashes_ = 0;
};

/// Device-initiated access to host memory through a window whose entry
/// selects the system-memory aperture.
class HostDma {
 public:
  HostDma(ArbitraryRW& rw, std::size_t window) : rw_(rw), w_(window) {}
  std::vector<std::uint8_t> read(std::uint64_t host_addr, std::uint64_t len);
  void write(std::uint64_t host_addr, std::span<const std::uint8_t> data);
  std::uint32_t read_u32(std::uint64_t host_addr);
  void write_u32(std::uint64_t host_addr, std::uint32_t v);

 private:
  std::uint64_t map(std::uint64_t host_addr);
  ArbitraryRW& rw_;
  std::size_t w_;
};

struct AttackReport {
  bool success = false;
  std::string failure;
  std::string site_label;
  int pte_bit = 0;
  std::uint64_t site_offset = 0;
  std::uint32_t fill_pages = 0;
  std::vector<std::uint32_t> massage_spikes;  // allocation indices
  std::uint32_t massage_period = 0;
  std::uint32_t massage_allocations = 0;
  std::uint32_t dense_pages = 0;
  std::uint64_t dense_budget_bytes = 0;
  std::uint32_t step3_attempts = 0;
  std::uint32_t attempts_to_first_own = 0;
  std::uint32_t step4_failures = 0;
  std::vector<std::string> attempt_outcomes;
  std::uint64_t corrupted_va = 0;
  std::uint64_t destination_va = 0;
  std::uint32_t windows = 0;
  std::map<std::string, double> phase_latency;
};

/// Steps 1-4 of the page-table attack, driven only through a GuestSession.
class AttackEngine {
 public:
  AttackEngine(GuestSession& g, AttackConfig cfg);

  void step1_fill();
  void step2_massage();
  void dense_fill();
  ScanOutcome step3_hammer_scan();
  std::optional<ArbitraryRW> step4_remassage_and_build();

  /// Full chain with retries.
  std::optional<ArbitraryRW> run();
  HostDma escalate_to_host(ArbitraryRW& rw, std::size_t window = 0);

  [[nodiscard]] const AttackState& state() const { return state_; }
  [[nodiscard]] const AttackReport& report() const { return report_; }
  [[nodiscard]] const ProfileHit& site() const { return *site_; }
  [[nodiscard]] bool has_site() const { return site_.has_value(); }
  /// Dense pages in splinter order; the site entry lives in the table of
  /// page number `site_page()`.
  [[nodiscard]] std::vector<std::uint64_t> dense_vas() const;
  [[nodiscard]] std::uint32_t site_page() const { return site_m_; }
  [[nodiscard]] std::uint32_t site_slice() const { return site_j_; }
  [[nodiscard]] std::uint64_t target_va() const { return site_->victim_va; }

 private:
  enum class St : std::uint8_t { resident, host, dense };
  struct Page {
    std::uint64_t va;
    St st = St::resident;
    bool keep = false;
    std::uint8_t c = 0;  // host-side slice of a dense page
  };

  class SpikeDetector {
   public:
    explicit SpikeDetector(double factor) : factor_(factor) {}
    bool observe(double latency);

   private:
    double factor_;
    std::deque<double> recent_;
  };

  std::size_t add_page(std::uint64_t va);
  std::optional<std::size_t> oldest_resident();
  void mirror_evict_oldest();
  void open_hole();
  void keepalive();
  bool fill_allocation(SpikeDetector& det, bool holes);
  void tag_page(std::uint64_t va);
  std::vector<std::uint64_t> dense_slices(std::size_t limit) const;
  void thrash();
  void reshuffle();
  double latency_mark();
  void phase_done(const char* name);

  GuestSession& g_;
  AttackConfig cfg_;
  std::mt19937_64 rng_;
  AttackState state_;
  AttackReport report_;
  std::vector<Page> pages_;
  std::unordered_map<std::uint64_t, std::size_t> page_of_va_;
  std::size_t oldest_ = 0;
  std::optional<ProfileHit> site_;
  std::vector<std::size_t> keep_;
  std::vector<std::uint64_t> fills_;     // 2 MiB + 4 KiB allocations
  std::size_t next_absorber_ = 0;
  std::vector<std::size_t> order_;       // dense pages in splinter order
  std::uint32_t site_m_ = 0;
  std::uint32_t site_j_ = 0;
  std::uint64_t corrupted_va_ = 0;
  std::uint32_t region_allocs_ = 0;      // allocations in the current PT region
  std::uint32_t fills_since_keepalive_ = 0;
  double mark_ = 0;
};

}  // namespace rhsim

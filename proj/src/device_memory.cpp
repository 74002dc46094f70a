// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/device_memory.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "rhsim/page_table.hpp"

namespace rhsim {

namespace {

std::pair<std::uint64_t, std::uint16_t> split_word(std::uint64_t word_index) {
  return {word_index / 512, static_cast<std::uint16_t>(word_index % 512)};
}

template <typename Words>
auto find_word(Words& w, std::uint16_t idx) {
  return std::lower_bound(w.begin(), w.end(), idx,
                          [](const auto& e, std::uint16_t i) { return e.first < i; });
}

bool contained(std::uint64_t base, std::uint64_t size, std::uint64_t addr,
               std::uint64_t len) {
  if (addr < base) return false;
  const std::uint64_t off = addr - base;
  return len <= size && off <= size - len;
}

}  // namespace

std::uint64_t SparseStore::read_word(std::uint64_t word_index) const {
  auto [page, idx] = split_word(word_index);
  auto it = pages_.find(page);
  if (it == pages_.end()) return 0;
  auto w = find_word(it->second, idx);
  return (w != it->second.end() && w->first == idx) ? w->second : 0;
}

void SparseStore::write_word(std::uint64_t word_index, std::uint64_t value) {
  auto [page, idx] = split_word(word_index);
  auto it = pages_.find(page);
  if (it == pages_.end()) {
    if (value == 0) return;
    it = pages_.emplace(page, PageWords{}).first;
  }
  auto& words = it->second;
  auto w = find_word(words, idx);
  if (w != words.end() && w->first == idx) {
    if (value == 0) {
      words.erase(w);
      if (words.empty()) pages_.erase(it);
    } else {
      w->second = value;
    }
  } else if (value != 0) {
    words.insert(w, {idx, value});
  }
}

void SparseStore::read(std::uint64_t addr, std::span<std::uint8_t> out) const {
  std::fill(out.begin(), out.end(), std::uint8_t{0});
  const std::uint64_t end = addr + out.size();
  std::uint64_t cur = addr;
  while (cur < end) {
    const std::uint64_t page = cur / kPage4K;
    const std::uint64_t page_end = std::min(end, (page + 1) * kPage4K);
    auto it = pages_.find(page);
    if (it != pages_.end()) {
      for (const auto& [idx, val] : it->second) {
        const std::uint64_t wa = page * kPage4K + std::uint64_t{idx} * 8;
        if (wa + 8 <= cur || wa >= page_end) continue;
        for (int b = 0; b < 8; ++b) {
          const std::uint64_t a = wa + b;
          if (a >= cur && a < page_end) out[a - addr] = static_cast<std::uint8_t>(val >> (8 * b));
        }
      }
    }
    cur = page_end;
  }
}

void SparseStore::write(std::uint64_t addr, std::span<const std::uint8_t> in) {
  std::uint64_t i = 0;
  while (i < in.size()) {
    const std::uint64_t a = addr + i;
    const std::uint64_t wi = a / 8;
    const unsigned shift = static_cast<unsigned>(a % 8);
    if (shift == 0 && in.size() - i >= 8) {
      std::uint64_t v = 0;
      for (int b = 0; b < 8; ++b) v |= std::uint64_t{in[i + b]} << (8 * b);
      write_word(wi, v);
      i += 8;
      continue;
    }
    std::uint64_t v = read_word(wi);
    for (unsigned b = shift; b < 8 && i < in.size(); ++b, ++i) {
      v &= ~(std::uint64_t{0xFF} << (8 * b));
      v |= std::uint64_t{in[i]} << (8 * b);
    }
    write_word(wi, v);
  }
}

SparseStore::PageWords SparseStore::page_words(std::uint64_t page) const {
  auto it = pages_.find(page);
  return it == pages_.end() ? PageWords{} : it->second;
}

void SparseStore::set_page_words(std::uint64_t page, const PageWords& words) {
  if (words.empty()) {
    pages_.erase(page);
  } else {
    pages_[page] = words;
  }
}

void SparseStore::clear_page(std::uint64_t page) { pages_.erase(page); }

void Geometry::validate() const {
  if (capacity == 0 || capacity % kPage2M != 0)
    throw ConfigError("capacity must be a positive multiple of 2 MiB");
  if (banks == 0 || row_size == 0 || row_size % 8 != 0)
    throw ConfigError("banks must be positive and row_size a multiple of 8");
  const std::uint64_t stripe = std::uint64_t{banks} * row_size;
  if (kPage2M % stripe != 0)
    throw ConfigError("banks*row_size must divide 2 MiB");
}

RowAddress phys_to_row(const Geometry& g, std::uint64_t addr) {
  const std::uint64_t frame = addr / kPage2M;
  const std::uint64_t within = addr % kPage2M;
  const std::uint64_t stripe_bytes = std::uint64_t{g.banks} * g.row_size;
  RowAddress r;
  r.bank = static_cast<std::uint32_t>((within / g.row_size) % g.banks);
  r.row = (within / stripe_bytes) * g.frames_2m() + frame;
  r.column = static_cast<std::uint32_t>(addr % g.row_size);
  return r;
}

std::uint64_t row_to_phys(const Geometry& g, const RowAddress& r) {
  const std::uint64_t frame = r.row % g.frames_2m();
  const std::uint64_t stripe = r.row / g.frames_2m();
  return frame * kPage2M + stripe * g.banks * g.row_size +
         std::uint64_t{r.bank} * g.row_size + r.column;
}

std::vector<FlipVerdict> classify_flips(const std::vector<BitFlipSite>& profile,
                                        std::uint64_t mem_limit,
                                        std::uint32_t row_size) {
  std::vector<FlipVerdict> out;
  out.reserve(profile.size());
  for (const auto& s : profile) {
    FlipVerdict v{s, false, 0, {}};
    const int bit = site_pte_bit(s);
    if (s.byte_in_row >= row_size || s.bit > 7) {
      v.reason = "site outside its row";
    } else if (bit < kPfnLowBit || bit > kPfnHighBit) {
      v.reason = "bit outside pfn field";
    } else {
      v.jump = pte_bit_to_jump(bit);
      if (v.jump < kPage2M) {
        v.reason = "jump below 2 MiB";
      } else if (v.jump >= mem_limit) {
        v.reason = "jump exceeds memory limit";
      } else {
        v.eligible = true;
      }
    }
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<BitFlipSite> eligible_flips(const std::vector<BitFlipSite>& profile,
                                        std::uint64_t mem_limit, std::uint32_t row_size) {
  if (profile.empty()) throw DomainError("empty fault profile");
  std::vector<BitFlipSite> out;
  for (auto& v : classify_flips(profile, mem_limit, row_size))
    if (v.eligible) out.push_back(v.site);
  return out;
}

std::vector<BitFlipSite> default_profile(const Geometry& g, std::uint64_t data_pool_start) {
  struct Row {
    const char* label;
    std::uint32_t bank, byte, bit;
  };
  static constexpr std::array<Row, 9> kRows{{{"A1", 0, 2, 4},
                                             {"B1", 1, 2, 6},
                                             {"C1", 2, 2, 4},
                                             {"C2", 2, 3, 2},
                                             {"D1", 3, 2, 4},
                                             {"E1", 4, 3, 4},
                                             {"F1", 5, 3, 0},
                                             {"F2", 5, 3, 1},
                                             {"F3", 5, 3, 7}}};
  const std::uint64_t frames = g.frames_2m();
  const std::uint64_t first = data_pool_start / kPage2M + 1;
  const std::uint64_t span = frames - first - 2;
  const std::uint32_t stripes = g.stripes_per_frame();
  const std::uint32_t words_per_row = g.row_size / 8;
  std::vector<BitFlipSite> out;
  for (std::size_t k = 0; k < kRows.size(); ++k) {
    BitFlipSite s;
    s.label = kRows[k].label;
    s.bank = kRows[k].bank % g.banks;
    const std::uint64_t frame = first + (k + 1) * span / 10;
    const std::uint64_t stripe = (5 * k + 3) % stripes;
    s.victim_row = stripe * frames + frame;
    s.byte_in_row = static_cast<std::uint32_t>(((13 * k + 4) % words_per_row) * 8 + kRows[k].byte);
    s.bit = static_cast<std::uint8_t>(kRows[k].bit);
    s.direction = (k % 2 == 0) ? FlipDirection::one_to_zero : FlipDirection::zero_to_one;
    out.push_back(s);
  }
  return out;
}

std::vector<BitFlipSite> parse_profile(const std::string& text) {
  std::vector<BitFlipSite> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    std::uint64_t bank, row, byte, bit, dir;
    std::string extra;
    if (!(fields >> bank >> row >> byte >> bit >> dir) || (fields >> extra) || bit > 7 ||
        dir > 1)
      throw ConfigError("bad fault profile line " + std::to_string(lineno));
    BitFlipSite s;
    s.bank = static_cast<std::uint32_t>(bank);
    s.victim_row = row;
    s.byte_in_row = static_cast<std::uint32_t>(byte);
    s.bit = static_cast<std::uint8_t>(bit);
    s.direction = dir == 0 ? FlipDirection::one_to_zero : FlipDirection::zero_to_one;
    s.label = "site" + std::to_string(out.size());
    out.push_back(s);
  }
  return out;
}

std::string format_profile(const std::vector<BitFlipSite>& sites) {
  std::ostringstream out;
  out << "# bank,row,byte,bit,direction\n";
  for (const auto& s : sites)
    out << s.bank << ',' << s.victim_row << ',' << s.byte_in_row << ',' << int{s.bit} << ','
        << (s.direction == FlipDirection::one_to_zero ? 0 : 1) << '\n';
  return out.str();
}

DeviceMemoryModel::DeviceMemoryModel(Geometry g, bool require_polarity)
    : geom_(g), require_polarity_(require_polarity) {
  geom_.validate();
}

void DeviceMemoryModel::check_range(std::uint64_t addr, std::uint64_t len) const {
  if (!contained(0, geom_.capacity, addr, len))
    throw RangeError("physical access out of range");
}

std::vector<std::uint8_t> DeviceMemoryModel::read_phys(std::uint64_t addr,
                                                       std::uint64_t len) const {
  check_range(addr, len);
  std::vector<std::uint8_t> out(len);
  store_.read(addr, out);
  return out;
}

void DeviceMemoryModel::read_into(std::uint64_t addr, std::span<std::uint8_t> out) const {
  check_range(addr, out.size());
  store_.read(addr, out);
}

void DeviceMemoryModel::write_phys(std::uint64_t addr, std::span<const std::uint8_t> data) {
  check_range(addr, data.size());
  store_.write(addr, data);
}

std::uint64_t DeviceMemoryModel::read_u64(std::uint64_t addr) const {
  check_range(addr, 8);
  if (addr % 8 == 0) return store_.read_word(addr / 8);
  std::array<std::uint8_t, 8> b{};
  store_.read(addr, b);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

void DeviceMemoryModel::write_u64(std::uint64_t addr, std::uint64_t value) {
  check_range(addr, 8);
  if (addr % 8 == 0) {
    store_.write_word(addr / 8, value);
    return;
  }
  std::array<std::uint8_t, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(value >> (8 * i));
  store_.write(addr, b);
}

void DeviceMemoryModel::register_sites(std::vector<BitFlipSite> sites) {
  for (const auto& s : sites) {
    if (s.bank >= geom_.banks || s.victim_row >= geom_.rows_per_bank() ||
        s.byte_in_row >= geom_.row_size || s.bit > 7)
      throw ConfigError("fault site outside device geometry");
  }
  sites_ = std::move(sites);
}

std::uint64_t DeviceMemoryModel::site_phys(const BitFlipSite& s) const {
  return row_to_phys(geom_, {s.bank, s.victim_row, s.byte_in_row});
}

std::vector<AppliedFlip> DeviceMemoryModel::hammer(
    std::uint32_t bank, const std::vector<std::uint64_t>& aggressor_rows) {
  std::vector<std::uint64_t> rows = aggressor_rows;
  std::sort(rows.begin(), rows.end());
  auto has = [&](std::uint64_t r) { return std::binary_search(rows.begin(), rows.end(), r); };
  std::vector<AppliedFlip> applied;
  for (const auto& s : sites_) {
    if (s.bank != bank || s.victim_row == 0) continue;
    if (!has(s.victim_row - 1) || !has(s.victim_row + 1)) continue;
    const std::uint64_t addr = site_phys(s);
    std::array<std::uint8_t, 1> byte{};
    store_.read(addr, byte);
    const bool set = (byte[0] >> s.bit) & 1;
    const bool source_is_one = s.direction == FlipDirection::one_to_zero;
    if (require_polarity_ && set != source_is_one) continue;
    AppliedFlip f{addr, s.bit, byte[0], static_cast<std::uint8_t>(byte[0] ^ (1u << s.bit)),
                  s.bank, s.victim_row, s.label};
    byte[0] = f.after;
    store_.write(addr, byte);
    journal_.push_back(f);
    applied.push_back(std::move(f));
  }
  return applied;
}

bool HostMemoryModel::in_iova(std::uint64_t addr, std::uint64_t len) const {
  return contained(layout_.iova_base, layout_.iova_len, addr, len);
}

bool HostMemoryModel::in_kernel(std::uint64_t addr, std::uint64_t len) const {
  return contained(layout_.kernel_base, layout_.kernel_len, addr, len);
}

void HostMemoryModel::dma_write_host(std::uint64_t addr, std::span<const std::uint8_t> data) {
  if (!in_iova(addr, data.size())) throw IommuFault("device write outside IOVA window");
  store_.write(addr, data);
  ++dma_writes_;
}

std::vector<std::uint8_t> HostMemoryModel::dma_read_host(std::uint64_t addr,
                                                         std::uint64_t len) const {
  if (!in_iova(addr, len)) throw IommuFault("device read outside IOVA window");
  std::vector<std::uint8_t> out(len);
  store_.read(addr, out);
  return out;
}

void HostMemoryModel::cpu_write(std::uint64_t addr, std::span<const std::uint8_t> data) {
  if (!in_iova(addr, data.size()) && !in_kernel(addr, data.size()))
    throw RangeError("host address outside modeled memory");
  store_.write(addr, data);
}

std::vector<std::uint8_t> HostMemoryModel::cpu_read(std::uint64_t addr,
                                                    std::uint64_t len) const {
  if (!in_iova(addr, len) && !in_kernel(addr, len))
    throw RangeError("host address outside modeled memory");
  std::vector<std::uint8_t> out(len);
  store_.read(addr, out);
  return out;
}

void HostMemoryModel::cpu_write_u32(std::uint64_t addr, std::uint32_t v) {
  std::array<std::uint8_t, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  cpu_write(addr, b);
}

std::uint32_t HostMemoryModel::cpu_read_u32(std::uint64_t addr) const {
  auto b = cpu_read(addr, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
  return v;
}

void HostMemoryModel::cpu_write_u64(std::uint64_t addr, std::uint64_t v) {
  std::array<std::uint8_t, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
  cpu_write(addr, b);
}

std::uint64_t HostMemoryModel::cpu_read_u64(std::uint64_t addr) const {
  auto b = cpu_read(addr, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
  return v;
}

}  // namespace rhsim

#include <gtest/gtest.h>

#include <bit>
#include <random>

#include "rhsim/device_memory.hpp"
#include "rhsim/page_table.hpp"

using namespace rhsim;

namespace {

Geometry small_geometry() {
  Geometry g;
  g.capacity = 64 * MiB;
  return g;
}

// Independent address split: byte -> (frame, offset) -> (stripe, bank, column).
RowAddress oracle_row(const Geometry& g, std::uint64_t addr) {
  const std::uint64_t frames = g.capacity / (2 * MiB);
  const std::uint64_t frame = addr >> 21;
  const std::uint64_t off = addr & (2 * MiB - 1);
  const std::uint64_t stripe = off / (std::uint64_t{g.banks} * g.row_size);
  return {static_cast<std::uint32_t>((off / g.row_size) % g.banks), stripe * frames + frame,
          static_cast<std::uint32_t>(off % g.row_size)};
}

BitFlipSite site_at(const Geometry& g, std::uint32_t bank, std::uint64_t row, std::uint32_t byte,
                    std::uint8_t bit, FlipDirection d) {
  (void)g;
  BitFlipSite s;
  s.bank = bank;
  s.victim_row = row;
  s.byte_in_row = byte;
  s.bit = bit;
  s.direction = d;
  s.label = "t";
  return s;
}

std::uint64_t hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += std::popcount(static_cast<unsigned>(a[i] ^ b[i]));
  return n;
}

}  // namespace

TEST(DeviceMemory, ReadAfterWrite) {
  DeviceMemoryModel m(small_geometry());
  const std::vector<std::uint8_t> data(8, 0xAA);
  m.write_phys(0, data);
  EXPECT_EQ(m.read_phys(0, 8), data);
}

TEST(DeviceMemory, UnwrittenBytesReadZero) {
  DeviceMemoryModel m(small_geometry());
  EXPECT_EQ(m.read_phys(12345, 16), std::vector<std::uint8_t>(16, 0));
}

TEST(DeviceMemory, ReadAtCapacityIsRangeError) {
  DeviceMemoryModel m(small_geometry());
  EXPECT_THROW((void)m.read_phys(m.capacity(), 1), RangeError);
  EXPECT_THROW((void)m.read_phys(m.capacity() - 4, 8), RangeError);
  EXPECT_NO_THROW((void)m.read_phys(m.capacity() - 8, 8));
}

TEST(DeviceMemory, CapacityMustBeWholeLargePages) {
  Geometry g = small_geometry();
  g.capacity += 4096;
  EXPECT_THROW(DeviceMemoryModel m(g), SimError);
}

TEST(DeviceMemory, RowMappingMatchesIndependentSplit) {
  const Geometry g = small_geometry();
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint64_t> pick(0, g.capacity - 1);
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t a = pick(rng);
    const RowAddress r = phys_to_row(g, a);
    EXPECT_EQ(r, oracle_row(g, a));
    EXPECT_EQ(row_to_phys(g, r), a);
  }
}

TEST(DeviceMemory, NeighbourRowsSitInNeighbourFrames) {
  const Geometry g = small_geometry();
  const std::uint64_t a = 5 * kPage2M + 3 * g.banks * g.row_size + 2 * g.row_size + 40;
  const RowAddress r = phys_to_row(g, a);
  const std::uint64_t up = row_to_phys(g, {r.bank, r.row + 1, r.column});
  const std::uint64_t down = row_to_phys(g, {r.bank, r.row - 1, r.column});
  EXPECT_EQ(up, a + kPage2M);
  EXPECT_EQ(down, a - kPage2M);
}

TEST(DeviceMemory, DoubleSidedHammerFlipsExactlyTheSiteBit) {
  const Geometry g = small_geometry();
  DeviceMemoryModel m(g);
  const std::uint64_t row = 2 * g.frames_2m() + 7;
  const BitFlipSite s = site_at(g, 3, row, 2, 4, FlipDirection::one_to_zero);
  m.register_sites({s});
  const std::uint64_t addr = m.site_phys(s);
  const std::uint64_t frame = addr & ~(kPage4K - 1);
  std::vector<std::uint8_t> img(kPage4K, 0xFF);
  m.write_phys(frame, img);
  const auto before = m.read_phys(frame, kPage4K);
  const auto flips = m.hammer(3, {row - 1, row + 1});
  ASSERT_EQ(flips.size(), 1u);
  const auto after = m.read_phys(frame, kPage4K);
  EXPECT_EQ(hamming(before, after), 1u);
  EXPECT_EQ(after[addr - frame], 0xFF ^ (1u << 4));
  // pte_bit 20 inside the aligned word.
  EXPECT_EQ(site_pte_bit(s), 20);
  EXPECT_EQ(m.read_u64(addr & ~7ull), 0xFFFFFFFFFFFFFFFFull ^ (1ull << 20));
}

TEST(DeviceMemory, SingleSidedHammerIsIgnored) {
  const Geometry g = small_geometry();
  DeviceMemoryModel m(g);
  const std::uint64_t row = g.frames_2m() + 9;
  const BitFlipSite s = site_at(g, 1, row, 10, 1, FlipDirection::one_to_zero);
  m.register_sites({s});
  m.write_u64(m.site_phys(s) & ~7ull, ~0ull);
  EXPECT_TRUE(m.hammer(1, {row - 1}).empty());
  EXPECT_TRUE(m.hammer(1, {row + 1}).empty());
  EXPECT_TRUE(m.hammer(2, {row - 1, row + 1}).empty());
  EXPECT_TRUE(m.flip_journal().empty());
}

TEST(DeviceMemory, PolarityGatesTheFlip) {
  const Geometry g = small_geometry();
  DeviceMemoryModel m(g);
  const std::uint64_t row = g.frames_2m() + 4;
  const BitFlipSite s = site_at(g, 0, row, 0, 0, FlipDirection::one_to_zero);
  m.register_sites({s});
  // cell holds 0 already: nothing to do
  EXPECT_TRUE(m.hammer(0, {row - 1, row + 1}).empty());
  m.write_u64(m.site_phys(s), 1);
  EXPECT_EQ(m.hammer(0, {row - 1, row + 1}).size(), 1u);
  EXPECT_EQ(m.read_u64(m.site_phys(s)), 0u);
  EXPECT_TRUE(m.hammer(0, {row - 1, row + 1}).empty());

  DeviceMemoryModel relaxed(g, false);
  relaxed.register_sites({s});
  EXPECT_EQ(relaxed.hammer(0, {row - 1, row + 1}).size(), 1u);
  EXPECT_EQ(relaxed.read_u64(relaxed.site_phys(s)), 1u);
}

TEST(DeviceMemory, HammerIsDeterministicAndConservesBits) {
  const Geometry g = small_geometry();
  std::mt19937_64 rng(11);
  std::vector<BitFlipSite> sites;
  for (int i = 0; i < 40; ++i) {
    const std::uint64_t row = 1 + rng() % (g.rows_per_bank() - 2);
    sites.push_back(site_at(g, static_cast<std::uint32_t>(rng() % g.banks), row,
                            static_cast<std::uint32_t>(rng() % g.row_size),
                            static_cast<std::uint8_t>(rng() % 8),
                            rng() % 2 ? FlipDirection::one_to_zero : FlipDirection::zero_to_one));
  }
  auto build = [&] {
    auto m = std::make_unique<DeviceMemoryModel>(g);
    m->register_sites(sites);
    std::mt19937_64 fill(5);
    for (const auto& s : sites) m->write_u64(m->site_phys(s) & ~7ull, fill());
    return m;
  };
  auto a = build();
  auto b = build();
  const auto img_before = a->read_phys(0, g.capacity);
  for (std::uint32_t bank = 0; bank < g.banks; ++bank) {
    std::vector<std::uint64_t> rows;
    for (const auto& s : sites)
      if (s.bank == bank) rows.insert(rows.end(), {s.victim_row - 1, s.victim_row + 1});
    const auto fa = a->hammer(bank, rows);
    const auto fb = b->hammer(bank, rows);
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t k = 0; k < fa.size(); ++k) EXPECT_EQ(fa[k].addr, fb[k].addr);
  }
  const auto img_after = a->read_phys(0, g.capacity);
  EXPECT_EQ(hamming(img_before, img_after), a->flip_journal().size());
  EXPECT_EQ(a->read_phys(0, g.capacity), b->read_phys(0, g.capacity));
  EXPECT_GT(a->flip_journal().size(), 0u);
}

TEST(DeviceMemory, NineProfiledFlipsAreAllEligible) {
  const Geometry g;
  const auto prof = default_profile(g, 96 * MiB);
  ASSERT_EQ(prof.size(), 9u);
  EXPECT_EQ(eligible_flips(prof, 48 * GiB).size(), 9u);
}

TEST(DeviceMemory, EligibilityBounds) {
  const Geometry g;
  BitFlipSite small = site_at(g, 0, 10, 2, 0, FlipDirection::one_to_zero);  // pte bit 16
  BitFlipSite huge = site_at(g, 0, 10, 4, 0, FlipDirection::one_to_zero);   // pte bit 32
  BitFlipSite flags = site_at(g, 0, 10, 0, 3, FlipDirection::one_to_zero);  // aperture bit
  BitFlipSite outside = site_at(g, 0, 10, 4096, 0, FlipDirection::one_to_zero);
  const auto v = classify_flips({small, huge, flags, outside}, 48 * GiB);
  ASSERT_EQ(v.size(), 4u);
  for (const auto& x : v) {
    EXPECT_FALSE(x.eligible);
    EXPECT_FALSE(x.reason.empty());
  }
  EXPECT_EQ(v[0].jump, std::uint64_t{1} << 20);
  EXPECT_EQ(v[1].jump, std::uint64_t{1} << 36);
  EXPECT_TRUE(eligible_flips({small, huge}, 48 * GiB).empty());
  EXPECT_THROW((void)eligible_flips({}, 48 * GiB), DomainError);
}

TEST(DeviceMemory, ProfileRoundTrip) {
  const Geometry g;
  const auto prof = default_profile(g, 96 * MiB);
  const auto back = parse_profile(format_profile(prof));
  ASSERT_EQ(back.size(), prof.size());
  for (std::size_t i = 0; i < prof.size(); ++i) {
    EXPECT_EQ(back[i].bank, prof[i].bank);
    EXPECT_EQ(back[i].victim_row, prof[i].victim_row);
    EXPECT_EQ(back[i].byte_in_row, prof[i].byte_in_row);
    EXPECT_EQ(back[i].bit, prof[i].bit);
    EXPECT_EQ(back[i].direction, prof[i].direction);
  }
  EXPECT_THROW((void)parse_profile("1,2,3\n"), SimError);
  EXPECT_EQ(parse_profile("# comment\n0,5,2,4,0\n").size(), 1u);
}

TEST(HostMemory, DmaInsideWindowSucceeds) {
  HostMemoryModel h;
  const auto& l = h.layout();
  const std::vector<std::uint8_t> d = {1, 2, 3, 4};
  h.dma_write_host(l.iova_base + 0x42000, d);
  EXPECT_EQ(h.dma_read_host(l.iova_base + 0x42000, 4), d);
  EXPECT_EQ(h.cpu_read(l.iova_base + 0x42000, 4), d);
}

TEST(HostMemory, DmaAtWindowEndFaults) {
  HostMemoryModel h;
  const auto& l = h.layout();
  const std::vector<std::uint8_t> d = {9};
  EXPECT_THROW(h.dma_write_host(l.iova_base + l.iova_len, d), IommuFault);
  EXPECT_THROW(h.dma_write_host(l.kernel_base, d), IommuFault);
  EXPECT_THROW((void)h.dma_read_host(l.kernel_base, 4), IommuFault);
}

TEST(HostMemory, SpanningWriteIsAllOrNothing) {
  HostMemoryModel h;
  const auto& l = h.layout();
  const std::vector<std::uint8_t> d(16, 0x5A);
  const std::uint64_t at = l.iova_base + l.iova_len - 8;
  EXPECT_THROW(h.dma_write_host(at, d), IommuFault);
  EXPECT_EQ(h.cpu_read(at, 8), std::vector<std::uint8_t>(8, 0));
  EXPECT_EQ(h.dma_write_count(), 0u);
}

TEST(HostMemory, RandomDmaSucceedsIffContained) {
  HostMemoryModel h;
  const auto& l = h.layout();
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::uint64_t> off(0, 3 * l.iova_len);
  std::uniform_int_distribution<std::uint64_t> len(1, 8192);
  for (int i = 0; i < 10000; ++i) {
    const std::uint64_t a = l.iova_base - l.iova_len + off(rng);
    const std::vector<std::uint8_t> d(len(rng), static_cast<std::uint8_t>(i));
    const bool inside = a >= l.iova_base && a + d.size() <= l.iova_base + l.iova_len;
    bool ok = true;
    try {
      h.dma_write_host(a, d);
    } catch (const IommuFault&) {
      ok = false;
    }
    EXPECT_EQ(ok, inside) << "addr " << a << " len " << d.size();
  }
}

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "rhsim/guest_api.hpp"
#include "rhsim/host_driver.hpp"
#include "rhsim/page_table.hpp"

using namespace rhsim;

namespace {

GpuConfig small_gpu(std::uint64_t mib = 256) {
  GpuConfig c;
  c.geometry.capacity = mib * MiB;
  return c;
}

std::uint64_t leaf_slot(Gpu& g, std::uint32_t ctx, std::uint64_t va) {
  const std::uint64_t table = g.memory().read_u64(g.pd0_entry_phys(ctx, va) + 8) & ~0xFFull;
  return table + ((va >> 16) & 31) * 8;
}

// Memory holds exactly one free 2 MiB frame plus a few small frames when the
// measured context makes its next 2 MiB + 4 KiB touch. `prior` tail-only
// allocations come first; the table region is due at allocation 420.
struct OneHole {
  double latency = 0;
  bool region_created = false;
};

OneHole touch_with_one_hole(std::uint32_t prior) {
  Gpu g(small_gpu());
  GuestSession fill(g, g.create_context(), 1);
  GuestSession meas(g, g.create_context(), 2);
  for (std::uint32_t i = 0; i < prior; ++i) {
    const std::uint64_t va = meas.uvm_alloc(kPage2M + kPage4K);
    meas.timed_touch(va + kPage2M, kPage4K);
  }
  std::vector<std::uint64_t> pages;
  while (g.frames().full_2m() > 0) {
    pages.push_back(fill.uvm_alloc(kPage2M));
    fill.timed_touch(pages.back(), kPage2M);
  }
  fill.cpu_touch(pages[0], kPage64K);
  fill.cpu_touch(pages[1], kPage2M);
  EXPECT_EQ(g.frames().full_2m(), 1u);
  const std::size_t events = g.events().size();
  const std::uint64_t va = meas.uvm_alloc(kPage2M + kPage4K);
  OneHole r;
  r.latency = meas.timed_touch(va, kPage2M + kPage4K);
  for (std::size_t i = events; i < g.events().size(); ++i)
    r.region_created |= g.events()[i].kind == EventKind::pt_region;
  return r;
}

}  // namespace

TEST(GuestSession, TouchLatencyFreeVersusFull) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 1);
  const std::uint64_t first = s.uvm_alloc(kPage2M);
  EXPECT_DOUBLE_EQ(s.timed_touch(first, kPage2M), 1.0);
  double last = 1.0;
  for (int i = 0; i < 400 && last <= 1.0; ++i) {
    const std::uint64_t va = s.uvm_alloc(kPage2M);
    last = s.timed_touch(va, kPage2M);
  }
  EXPECT_GE(last, 100.0);
}

TEST(GuestSession, SpikeWhenTableRegionTakesLastHole) {
  const OneHole due = touch_with_one_hole(420);
  EXPECT_TRUE(due.region_created);
  EXPECT_GE(due.latency, 100.0);
  const OneHole early = touch_with_one_hole(419);
  EXPECT_FALSE(early.region_created);
  EXPECT_DOUBLE_EQ(early.latency, 1.0);
}

TEST(GuestSession, SpikeIffEvictionOverRandomTrace) {
  Gpu g(small_gpu(160));
  GuestSession s(g, g.create_context(), 3);
  std::mt19937_64 rng(11);
  std::vector<std::uint64_t> live;
  const std::uint64_t sizes[] = {kPage4K, kPage64K, 1 * MiB, kPage2M, kPage2M + kPage4K};
  std::size_t spikes = 0;
  for (int i = 0; i < 1500; ++i) {
    double lat;
    if (live.empty() || rng() % 4 != 0) {
      const std::uint64_t size = sizes[rng() % 5];
      live.push_back(s.uvm_alloc(size));
      lat = s.timed_touch(live.back(), size);
    } else {
      lat = s.timed_touch(live[rng() % live.size()], kPage4K);
    }
    bool evicted = false;
    for (const auto& e : g.events())
      evicted |= e.tick == g.tick() && e.kind == EventKind::evict;
    EXPECT_EQ(lat > 1.0, evicted) << i;
    spikes += lat > 1.0;
  }
  EXPECT_GT(spikes, 0u);
}

TEST(GuestSession, JitterStaysWithinHalfWidth) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 4, TimingModel{1.0, 99.0, 0.2});
  for (int i = 0; i < 200; ++i) {
    const double lat = s.timed_touch(s.uvm_alloc(kPage64K), kPage64K);
    EXPECT_GE(lat, 0.8);
    EXPECT_LE(lat, 1.2);
  }
}

TEST(GuestSession, WriteReadIdentity) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 1);
  const std::uint64_t va = s.uvm_alloc(kPage2M);
  std::vector<std::uint8_t> data(3000);
  std::mt19937 rng(5);
  for (auto& b : data) b = static_cast<std::uint8_t>(rng());
  s.write_data(va + 77, data);
  EXPECT_EQ(s.read_data(va + 77, data.size()), data);
  s.write_u64(va + 4096, 0xDEADBEEFCAFEF00Dull);
  EXPECT_EQ(s.read_u64(va + 4096), 0xDEADBEEFCAFEF00Dull);
}

TEST(GuestSession, ReadThroughFlippedEntryReturnsDestination) {
  Gpu g(small_gpu());
  const auto ctx = g.create_context();
  GuestSession s(g, ctx, 1);
  const std::uint64_t a = s.uvm_alloc(kPage64K);
  const std::uint64_t b = s.uvm_alloc(kPage64K);
  s.timed_touch(a, kPage64K);
  s.timed_touch(b, kPage64K);
  s.write_u64(a + 8, 0xAAAA);
  s.write_u64(b + 8, 0xBBBB);
  const std::uint64_t pa = *g.resident_phys(ctx, a);
  const std::uint64_t pb = *g.resident_phys(ctx, b);
  const std::uint64_t slot = leaf_slot(g, ctx, a);
  Pte e = decode_pte(g.memory().read_u64(slot));
  e.pfn = pb >> 12;
  g.memory().write_u64(slot, encode_pte(e));
  // The cached translation still points at the original frame.
  EXPECT_EQ(s.read_u64(a + 8), 0xAAAAu);
  g.tlb().flush();
  EXPECT_EQ(s.read_u64(a + 8), 0xBBBBu);
  EXPECT_NE(pa, pb);
}

TEST(GuestSession, GatherAndScatter) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 1);
  const std::uint64_t va = s.uvm_alloc(kPage64K);
  const std::pair<std::uint64_t, std::uint64_t> w[] = {{va, 1}, {va + 8, 2}, {0x7000000000ull, 3}};
  EXPECT_EQ(s.scatter_u64(w), 2u);
  const std::uint64_t r[] = {va, va + 8, 0x7000000000ull};
  const auto got = s.gather_u64(r);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0], 1u);
  EXPECT_EQ(got[1], 2u);
  EXPECT_FALSE(got[2]);
}

TEST(GuestSession, HammerOwnFlipsSiteBetweenOwnPages) {
  Gpu g(small_gpu());
  const auto ctx = g.create_context();
  GuestSession s(g, ctx, 1);
  std::vector<std::uint64_t> vas;
  for (int i = 0; i < 3; ++i) {
    vas.push_back(s.uvm_alloc(kPage2M));
    s.timed_touch(vas.back(), kPage2M);
  }
  const std::uint64_t f0 = *g.resident_phys(ctx, vas[0]) / kPage2M;
  ASSERT_EQ(*g.resident_phys(ctx, vas[1]) / kPage2M, f0 + 1);
  ASSERT_EQ(*g.resident_phys(ctx, vas[2]) / kPage2M, f0 + 2);

  // Bit 20 of an aligned word: a 16 MiB jump if the word were an entry.
  const std::uint64_t off = 0x12345 & ~7ull;
  const RowAddress row = phys_to_row(g.memory().geometry(), (f0 + 1) * kPage2M + off + 2);
  BitFlipSite site{row.bank, row.row, row.column, 4, FlipDirection::one_to_zero, "t"};
  g.memory().register_sites({site});
  s.write_u64(vas[1] + off, 0xFF0000);

  const auto hits = s.profile_lookup();
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].victim_va, vas[1]);
  EXPECT_EQ(hits[0].low_va, vas[0]);
  EXPECT_EQ(hits[0].high_va, vas[2]);
  EXPECT_EQ(hits[0].offset, off + 2);
  EXPECT_EQ(hits[0].pte_bit, 20);

  // One aggressor only: nothing flips.
  const std::uint64_t one[] = {vas[0] + off};
  s.hammer_own(one);
  EXPECT_EQ(s.read_u64(vas[1] + off), 0xFF0000u);
  const std::uint64_t both[] = {vas[0] + off, vas[2] + off};
  s.hammer_own(both);
  EXPECT_EQ(s.read_u64(vas[1] + off), 0xEF0000u);
  // Polarity: the cell is now 0, hammering again leaves it.
  s.hammer_own(both);
  EXPECT_EQ(s.read_u64(vas[1] + off), 0xEF0000u);
}

TEST(GuestSession, HammerOwnRejectsForeignAddress) {
  Gpu g(small_gpu());
  GuestSession a(g, g.create_context(), 1);
  GuestSession b(g, g.create_context(), 2);
  const std::uint64_t theirs = b.uvm_alloc(kPage2M);
  b.timed_touch(theirs, kPage2M);
  const std::uint64_t mine = a.uvm_alloc(kPage2M);
  const std::uint64_t vas[] = {mine, theirs + kPage2M * 4};
  EXPECT_THROW(a.hammer_own(vas), AuditViolation);
  ASSERT_FALSE(a.audit().empty());
  EXPECT_EQ(a.audit().back().op, "hammer_own_rejected");
  EXPECT_TRUE(g.memory().flip_journal().empty());
}

TEST(GuestSession, DeviceAttributeQueryProducesQueueMessages) {
  {
    Gpu g(small_gpu());
    HostSystem host(g.host());
    GuestSession s(g, g.create_context(), 1, {}, &host);
    for (int i = 0; i < 17; ++i) s.device_attribute_query();
    EXPECT_EQ(host.rx_avail(), 17u);
  }
  {
    Gpu g(small_gpu());
    HostSystem host(g.host());
    GuestSession s(g, g.create_context(), 1, {}, &host);
    s.device_attribute_query();
    host.service();
    EXPECT_EQ(host.rx_avail(), 0u);
  }
  {
    // Driver drains 16 while the queue is being filled: 60 - 16 left.
    Gpu g(small_gpu());
    HostSystem host(g.host());
    GuestSession s(g, g.create_context(), 1, {}, &host);
    for (int i = 0; i < 30; ++i) s.device_attribute_query();
    for (int i = 0; i < 16; ++i) EXPECT_EQ(host.driver_receive(), 1u);
    for (int i = 0; i < 30; ++i) s.device_attribute_query();
    EXPECT_EQ(host.rx_avail(), 44u);
  }
}

TEST(GuestSession, EveryCallIsAudited) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 1);
  const std::uint64_t va = s.uvm_alloc(kPage64K);
  s.timed_touch(va, kPage64K);
  s.write_u64(va, 1);
  (void)s.read_u64(va);
  (void)s.mem_get_info();
  s.device_attribute_query();
  s.free(va);
  ASSERT_EQ(s.audit().size(), 7u);
  for (std::size_t i = 1; i < s.audit().size(); ++i)
    EXPECT_GT(s.audit()[i].tick, s.audit()[i - 1].tick);
  EXPECT_EQ(s.audit()[0].op, "uvm_alloc");
  EXPECT_EQ(s.audit()[6].op, "free");
}

TEST(GuestSession, SessionDoesNotTouchInternalViews) {
  Gpu g(small_gpu());
  GuestSession s(g, g.create_context(), 1);
  g.arm_audit(true);
  for (int i = 0; i < 20; ++i) {
    const std::uint64_t va = s.uvm_alloc(kPage2M + kPage4K);
    s.timed_touch(va, kPage2M + kPage4K);
    s.cpu_touch(va, kPage64K);
    s.write_u64(va + kPage2M, i);
  }
  (void)s.mem_get_info();
  (void)s.profile_lookup();
  g.arm_audit(false);
  EXPECT_EQ(g.audit_violations(), 0u);
  g.arm_audit(true);
  (void)g.frames();
  g.arm_audit(false);
  EXPECT_EQ(g.audit_violations(), 1u);
}

TEST(GuestSession, LatencyCsvMergesSessionsByTick) {
  Gpu g(small_gpu());
  GuestSession a(g, g.create_context(), 1);
  GuestSession b(g, g.create_context(), 2);
  const std::uint64_t x = a.uvm_alloc(kPage4K);
  const std::uint64_t y = b.uvm_alloc(kPage4K);
  a.timed_touch(x, kPage4K);
  b.timed_touch(y, kPage4K);
  const std::string csv = latency_csv({&b, &a});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "tick,ctx,op,latency");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "1,0,uvm_alloc,1");
  EXPECT_EQ(rows[1], "2,1,uvm_alloc,1");
  EXPECT_EQ(rows[2], "3,0,timed_touch,1");
  EXPECT_EQ(rows[3], "4,1,timed_touch,1");
}

#include <gtest/gtest.h>

#include <random>

#include "rhsim/attack_engine.hpp"
#include "rhsim/page_table.hpp"
#include "rhsim/scenario.hpp"

using namespace rhsim;

namespace {

AttackConfig config_for(const ScenarioConfig& sc, std::uint64_t seed) {
  AttackConfig ac;
  ac.geometry = sc.geometry();
  ac.seed = seed;
  return ac;
}

// Table-region frame placed by the massage, and the frame the site lives in.
std::pair<std::uint64_t, std::uint64_t> region_and_target(World& w, const AttackEngine& e) {
  const std::uint64_t target = *w.gpu->resident_phys(w.attacker_ctx, e.site().low_va) / kPage2M + 1;
  return {w.gpu->regions(w.attacker_ctx).back().frame2m, target};
}

struct SharedRun {
  ScenarioConfig sc;
  World w;
  std::unique_ptr<AttackEngine> e;
  std::optional<ArbitraryRW> rw;
  std::uint64_t violations = 0;
};

SharedRun& seed7() {
  static SharedRun* r = [] {
    auto* s = new SharedRun;
    s->w = make_world(s->sc, 7);
    s->e = std::make_unique<AttackEngine>(*s->w.attacker, config_for(s->sc, 7));
    s->w.gpu->arm_audit(true);
    if (auto rw = s->e->run()) s->rw.emplace(std::move(*rw));
    s->w.gpu->arm_audit(false);
    s->violations = s->w.gpu->audit_violations();
    return s;
  }();
  return *r;
}

}  // namespace

TEST(AttackEngine, Seed7ProducesVerifiedHandle) {
  SharedRun& r = seed7();
  ASSERT_TRUE(r.rw.has_value()) << r.e->report().failure;
  EXPECT_TRUE(r.e->report().success);
  EXPECT_GE(r.rw->windows().size(), 1u);
  EXPECT_EQ(r.violations, 0u);
}

TEST(AttackEngine, HandleReadsMatchDeviceMemory) {
  SharedRun& r = seed7();
  ASSERT_TRUE(r.rw);
  Gpu& g = *r.w.gpu;
  std::mt19937_64 rng(99);
  const std::uint64_t frames = g.memory().capacity() / kPage4K;
  std::vector<std::uint64_t> pick;
  for (int i = 0; i < 1000; ++i) pick.push_back(rng() % frames * kPage4K);
  // Frames holding recognisable content: the victim's marks.
  for (int i = 0; i < 8; ++i)
    pick.push_back(*g.resident_phys(r.w.victim_ctx, r.w.victim_va + i * kPage2M));
  const std::size_t batch = r.rw->windows().size();
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < pick.size(); i += batch) {
    const std::size_t n = std::min(batch, pick.size() - i);
    std::span<const std::uint64_t> part(pick.data() + i, n);
    g.arm_audit(true);
    const auto got = r.rw->read_frames(part);
    g.arm_audit(false);
    ASSERT_EQ(got.size(), n);
    for (std::size_t k = 0; k < n; ++k) {
      const auto truth = g.memory().read_phys(part[k], kPage4K);
      EXPECT_EQ(got[k], truth) << "frame " << part[k];
      nonzero += std::any_of(truth.begin(), truth.end(), [](std::uint8_t b) { return b != 0; });
    }
  }
  EXPECT_GT(nonzero, 0u);
  EXPECT_EQ(g.audit_violations(), r.violations);
  r.rw->restore();
}

TEST(AttackEngine, HandleWriteVisibleToVictim) {
  SharedRun& r = seed7();
  ASSERT_TRUE(r.rw);
  EXPECT_TRUE(victim_tamper_visible(r.w, *r.rw));
  r.rw->restore();
}

TEST(AttackEngine, EscalationReachesHostWindowOnly) {
  SharedRun& r = seed7();
  ASSERT_TRUE(r.rw);
  Gpu& g = *r.w.gpu;
  const HostLayout& l = g.host().layout();
  const std::uint8_t marker[] = {0x48, 0x4f, 0x53, 0x54};
  g.host().cpu_write(l.iova_base + 0x10, marker);
  g.memory().write_u64(l.iova_base + 0x10, 0x5652414d5652414dull);

  HostDma dma = r.e->escalate_to_host(*r.rw);
  EXPECT_EQ(r.e->state().phase, Phase::escalated);
  const auto got = dma.read(l.iova_base + 0x10, 4);
  EXPECT_EQ(got, std::vector<std::uint8_t>(std::begin(marker), std::end(marker)));
  dma.write_u32(l.iova_base + 0x20, 0xCAFEBABE);
  EXPECT_EQ(g.host().cpu_read(l.iova_base + 0x20, 4),
            (std::vector<std::uint8_t>{0xBE, 0xBA, 0xFE, 0xCA}));

  EXPECT_THROW((void)dma.read(l.iova_base + l.iova_len, 4), IommuFault);
  EXPECT_THROW((void)dma.read(l.iova_base - kPage4K, 4), IommuFault);
  // Kernel addresses do not even fit an entry's frame number.
  EXPECT_THROW((void)dma.read(l.kernel_base, 4), DomainError);

  // Same frame number, video-memory aperture: device memory, not host.
  r.rw->set_entry(0, encode_pte(make_pte(l.iova_base)));
  r.rw->thrash();
  EXPECT_EQ(r.w.attacker->read_u64(r.rw->windows()[0].window_va + 0x10), 0x5652414d5652414dull);
  r.rw->restore();
}

TEST(AttackEngine, MassagePlacesRegionAtTargetAndFillsDensely) {
  ScenarioConfig sc;
  World w = make_world(sc, 11);
  const std::uint64_t free_before = w.gpu->mem_get_info();
  AttackEngine e(*w.attacker, config_for(sc, 11));
  w.gpu->arm_audit(true);
  e.step1_fill();
  EXPECT_EQ(e.state().phase, Phase::fill);
  e.step2_massage();
  e.dense_fill();
  w.gpu->arm_audit(false);
  EXPECT_EQ(w.gpu->audit_violations(), 0u);

  const AttackReport& rep = e.report();
  // The attacker only fills what the victim left free, plus the three
  // evicting touches that confirm memory is full.
  EXPECT_LE(std::uint64_t{rep.fill_pages} * kPage2M, free_before + 3 * kPage2M);
  EXPECT_GE(std::uint64_t{rep.fill_pages} * kPage2M, free_before * 9 / 10);
  EXPECT_EQ(rep.massage_period, 508u);

  const auto [region, target] = region_and_target(w, e);
  EXPECT_EQ(region, target);
  std::uint64_t valid = 0;
  const std::uint64_t tables = kPage2M / kPt64KSize;
  for (std::uint64_t i = 0; i < tables; ++i)
    valid += w.gpu->valid_ptes_in_table(region * kPage2M + i * kPt64KSize, true);
  EXPECT_GE(static_cast<double>(valid) / (tables * 32), 0.968);
  EXPECT_LE(rep.dense_budget_bytes, 16 * GiB + kPage2M + kPage4K);
}

TEST(AttackEngine, WithoutTargetHoleRegionLandsElsewhere) {
  ScenarioConfig sc;
  World w = make_world(sc, 11);
  AttackConfig ac = config_for(sc, 11);
  ac.open_target_hole = false;
  AttackEngine e(*w.attacker, ac);
  e.step1_fill();
  e.step2_massage();
  const auto [region, target] = region_and_target(w, e);
  EXPECT_NE(region, target);
}

TEST(AttackEngine, PureLargePagesLeaveRegionSparse) {
  GpuConfig gc;
  Gpu g(gc);
  const auto ctx = g.create_context();
  for (int i = 0; i < 8192; ++i) {
    const std::uint64_t va = g.uvm_alloc(ctx, kPage2M);
    g.gpu_touch(ctx, va, kPage2M);
  }
  // Only directory entries were written: 16 B per 2 MiB page.
  std::uint64_t used = 0;
  for (const auto& r : g.regions(ctx)) used += r.cursor;
  EXPECT_LE(used, 8192 * 16 + gc.region0_fill + kPage4K);
  EXPECT_LT(static_cast<double>(used) / (g.regions(ctx).size() * kPage2M), 0.5);
}

TEST(AttackEngine, OwnDestinationNamesTheFrameTheEntryPointsAt) {
  ScenarioConfig sc;
  World w = make_world(sc, 7);
  AttackEngine e(*w.attacker, config_for(sc, 7));
  e.step1_fill();
  e.step2_massage();
  e.dense_fill();
  ScanOutcome s;
  for (int i = 0; i < 16; ++i) {
    s = e.step3_hammer_scan();
    if (s.kind == ScanKind::own_destination) break;
  }
  ASSERT_EQ(s.kind, ScanKind::own_destination);
  Gpu& g = *w.gpu;
  g.tlb().flush();
  const auto walked = g.walk(w.attacker_ctx, s.corrupted_va);
  ASSERT_TRUE(walked);
  const auto dest = g.resident_phys(w.attacker_ctx, s.destination_va);
  ASSERT_TRUE(dest);
  EXPECT_EQ(walked->phys / kPage64K, *dest / kPage64K);
  EXPECT_EQ(e.state().phase, Phase::hammer_scan);
  EXPECT_EQ(*e.state().corrupted_va, s.corrupted_va);
}

TEST(AttackEngine, SameSeedSameTranscript) {
  ScenarioConfig sc;
  auto once = [&] {
    World w = make_world(sc, 19);
    AttackEngine e(*w.attacker, config_for(sc, 19));
    const bool ok = e.run().has_value();
    std::vector<std::uint64_t> digests;
    for (const auto& a : w.attacker->audit()) digests.push_back(a.digest);
    return std::tuple(ok, e.report().attempt_outcomes, e.report().corrupted_va,
                      w.attacker->total_latency(), digests);
  };
  EXPECT_EQ(once(), once());
}

#include <gtest/gtest.h>

#include <memory>
#include <random>

#include "rhsim/attack_engine.hpp"
#include "rhsim/host_driver.hpp"
#include "rhsim/page_table.hpp"

using namespace rhsim;

namespace {

std::uint32_t oracle_fold(const std::vector<std::uint8_t>& b) {
  std::uint32_t x = 0;
  for (std::size_t i = 0; i + 3 < b.size(); i += 4)
    x ^= static_cast<std::uint32_t>(b[i] | b[i + 1] << 8 | b[i + 2] << 16 | b[i + 3] << 24);
  return x;
}

void put32(std::vector<std::uint8_t>& b, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

// Literal read-pointer update followed by the outgoing write.
std::uint32_t listing_write(std::uint32_t rx_read_ptr, std::uint32_t msg_count, std::uint32_t n) {
  std::uint32_t p = rx_read_ptr;
  p += n;
  if (p >= msg_count) p -= msg_count;
  return p;
}

// A GPU whose session holds a window entry it can rewrite through a second
// mapping of the table page, i.e. the capability the attack ends with.
struct Rig {
  std::unique_ptr<Gpu> gpu;
  std::unique_ptr<HostSystem> host;
  std::unique_ptr<GuestSession> g;
  std::unique_ptr<ArbitraryRW> rw;
  std::unique_ptr<HostDma> dma;

  explicit Rig(HostConfig hc = {}) {
    gpu = std::make_unique<Gpu>(GpuConfig{});
    host = std::make_unique<HostSystem>(gpu->host(), hc);
    const auto ctx = gpu->create_context();
    g = std::make_unique<GuestSession>(*gpu, ctx, 1, TimingModel{}, host.get());
    // Splintered pages cannot merge, so each slice keeps its own TLB entry.
    std::vector<std::uint64_t> thrash;
    for (int i = 0; i < 140; ++i) {
      const std::uint64_t va = g->uvm_alloc(kPage2M);
      g->timed_touch(va, kPage2M);
      g->cpu_touch(va, kPage64K);
      for (std::uint64_t s = 1; s < 32; ++s) thrash.push_back(va + s * kPage64K);
    }
    std::vector<ArbitraryRW::Window> wins;
    for (int i = 0; i < 2; ++i) {
      const std::uint64_t w = g->uvm_alloc(kPage64K);
      const std::uint64_t c = g->uvm_alloc(kPage64K);
      g->timed_touch(w, kPage64K);
      g->timed_touch(c, kPage64K);
      const std::uint64_t wslot = slot(ctx, w);
      const std::uint64_t cslot = slot(ctx, c);
      Pte e = decode_pte(gpu->memory().read_u64(cslot));
      e.pfn = (wslot & ~(kPage64K - 1)) >> 12;
      gpu->memory().write_u64(cslot, encode_pte(e));
      wins.push_back({w, c + (wslot & (kPage64K - 1)), gpu->memory().read_u64(wslot)});
    }
    gpu->tlb().flush();
    rw = std::make_unique<ArbitraryRW>(*g, std::move(wins), std::move(thrash));
    dma = std::make_unique<HostDma>(*rw, 0);
  }

  std::uint64_t slot(std::uint32_t ctx, std::uint64_t va) {
    const std::uint64_t table = gpu->memory().read_u64(gpu->pd0_entry_phys(ctx, va) + 8) & ~0xFFull;
    return table + ((va >> 16) & 31) * 8;
  }
};

}  // namespace

TEST(Checksum, XorFoldProperties) {
  EXPECT_EQ(checksum32(std::vector<std::uint8_t>(4096, 0)), 0u);
  std::mt19937_64 rng(3);
  std::vector<std::uint8_t> msg(4096);
  for (auto& b : msg) b = static_cast<std::uint8_t>(rng());
  EXPECT_EQ(checksum32(msg), oracle_fold(msg));
  put32(msg, 8, 0);
  put32(msg, 8, oracle_fold(msg));
  EXPECT_EQ(checksum32(msg), 0u);
  for (int i = 0; i < 200; ++i) {
    auto bad = msg;
    bad[rng() % bad.size()] ^= static_cast<std::uint8_t>(1u << (rng() % 8));
    EXPECT_NE(checksum32(bad), 0u);
  }
  EXPECT_THROW((void)checksum32(std::vector<std::uint8_t>(6)), DomainError);
}

TEST(Metadata, BytesRoundTrip) {
  const MsgqMetadata m{1, 2, 3, 4, 5, 6, 7, 8};
  const auto b = m.bytes();
  EXPECT_EQ(b.size(), MetaField::size);
  EXPECT_EQ(MsgqMetadata::parse(b), m);
  EXPECT_THROW((void)MsgqMetadata::parse(std::vector<std::uint8_t>(10)), RangeError);
}

TEST(Driver, SixteenEntriesLeaveMetadataAlone) {
  HostMemoryModel mem;
  HostSystem h(mem);
  const MsgqMetadata before = h.metadata();
  h.gsp_enqueue(16);
  EXPECT_EQ(h.rx_avail(), 16u);
  EXPECT_EQ(h.driver_receive(), 16u);
  EXPECT_EQ(h.rx_avail(), 0u);
  MsgqMetadata after = h.metadata();
  EXPECT_EQ(after.rx_read_ptr, 16u);
  after.rx_read_ptr = before.rx_read_ptr;
  EXPECT_EQ(after, before);
  EXPECT_TRUE(h.metadata_intact());
  EXPECT_EQ(mem.cpu_read_u32(h.kernel().read_outgoing), 16u);
  EXPECT_EQ(h.euid(), kInitialEuid);
}

TEST(Driver, SeventeenEntriesNeedSeventeenAvailable) {
  HostMemoryModel mem;
  HostSystem h(mem);
  for (int i = 0; i < 16; ++i) h.gsp_enqueue(1);
  const std::uint64_t target = h.kernel().cred_addr + kEuidOffset;
  const PrivescPayload p = build_privesc_payload(h.rx_seq(), target, 0);
  mem.dma_write_host(h.entry_addr(0), p.head);
  EXPECT_EQ(h.driver_receive(), 0u);
  EXPECT_EQ(h.rx_avail(), 16u);
  EXPECT_EQ(h.euid(), kInitialEuid);

  h.gsp_enqueue(1);
  mem.dma_write_host(h.entry_addr(16), p.meta_entry);
  EXPECT_EQ(h.driver_receive(), 17u);
  const MsgqMetadata m = h.metadata();
  EXPECT_EQ(m.p_read_outgoing, target);
  EXPECT_EQ(m.msg_count, 10u);
  EXPECT_EQ(m.rx_read_ptr, 0u);
  EXPECT_EQ(h.euid(), 0u);
  EXPECT_EQ(h.oversized_accepted(), 1u);
  EXPECT_FALSE(h.metadata_intact());
}

TEST(Driver, BadChecksumIsNotConsumed) {
  HostMemoryModel mem;
  HostSystem h(mem);
  for (int i = 0; i < 17; ++i) h.gsp_enqueue(1);
  PrivescPayload p = build_privesc_payload(h.rx_seq(), h.kernel().cred_addr + kEuidOffset, 0);
  p.head[MsgHeader::checksum] ^= 1;
  mem.dma_write_host(h.entry_addr(0), p.head);
  mem.dma_write_host(h.entry_addr(16), p.meta_entry);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(h.driver_receive(), 0u);
  EXPECT_EQ(h.rx_avail(), 17u);
  EXPECT_EQ(h.euid(), kInitialEuid);
  EXPECT_EQ(h.oversized_accepted(), 0u);
  EXPECT_EQ(h.read_index(), 0u);
}

TEST(Driver, WrongSequenceIsNotConsumed) {
  HostMemoryModel mem;
  HostSystem h(mem);
  for (int i = 0; i < 17; ++i) h.gsp_enqueue(1);
  const PrivescPayload p = build_privesc_payload(h.rx_seq() + 5, h.kernel().cred_addr + kEuidOffset, 0);
  mem.dma_write_host(h.entry_addr(0), p.head);
  mem.dma_write_host(h.entry_addr(16), p.meta_entry);
  EXPECT_EQ(h.driver_receive(), 0u);
  EXPECT_EQ(h.euid(), kInitialEuid);
}

TEST(MarkConsumed, DocumentedExamples) {
  struct Case {
    std::uint32_t ptr, count, n, written;
  };
  for (const Case c : {Case{0xFFFFFFF9u, 10, 17, 0}, Case{0, 100, 17, 17}, Case{5, 10, 17, 12}}) {
    HostMemoryModel mem;
    HostSystem h(mem);
    MsgqMetadata m = h.metadata();
    m.rx_read_ptr = c.ptr;
    m.msg_count = c.count;
    h.set_metadata(m);
    const WriteEffect e = h.msgq_rx_mark_consumed(c.n);
    ASSERT_TRUE(e.write_addr);
    EXPECT_EQ(*e.write_addr, h.kernel().read_outgoing);
    EXPECT_EQ(e.written, c.written);
    EXPECT_EQ(mem.cpu_read_u32(h.kernel().read_outgoing), c.written);
    EXPECT_EQ(h.metadata().rx_read_ptr, c.written);
  }
}

TEST(MarkConsumed, MatchesLiteralUpdateOnRandomTriples) {
  std::mt19937_64 rng(8);
  HostMemoryModel mem;
  HostSystem h(mem);
  for (int i = 0; i < 10000; ++i) {
    const auto ptr = static_cast<std::uint32_t>(rng());
    const auto count = static_cast<std::uint32_t>(i % 3 == 0 ? rng() % 128 : rng());
    const auto n = static_cast<std::uint32_t>(i % 2 ? rng() % 64 : rng());
    MsgqMetadata m = h.metadata();
    m.rx_read_ptr = ptr;
    m.msg_count = count;
    h.set_metadata(m);
    const WriteEffect e = h.msgq_rx_mark_consumed(n);
    EXPECT_EQ(e.written, listing_write(ptr, count, n));
    EXPECT_EQ(advance_read_ptr(ptr, count, n), listing_write(ptr, count, n));
  }
}

TEST(MarkConsumed, CallbacksInvokedInOrder) {
  HostMemoryModel mem;
  HostSystem h(mem);
  const KernelModel& k = h.kernel();
  h.msgq_rx_mark_consumed(1);
  EXPECT_EQ(k.invoked, (std::vector<std::uint64_t>{k.fn_flush, k.fn_barrier, k.fn_notify}));
  // Attacker-chosen callback addresses are the ones called.
  h.kernel().invoked.clear();
  h.kernel().functions.insert(0xFFFF'8880'00AB'C000ull);
  MsgqMetadata m = h.metadata();
  m.fcn_notify = 0xFFFF'8880'00AB'C000ull;
  m.fcn_flush = 0;
  m.fcn_barrier = 0;
  h.set_metadata(m);
  h.msgq_rx_mark_consumed(1);
  EXPECT_EQ(k.invoked, (std::vector<std::uint64_t>{0xFFFF'8880'00AB'C000ull}));
  EXPECT_EQ(k.driver, DriverState::alive);
}

TEST(MarkConsumed, BackendCallbackReplacesWrite) {
  HostMemoryModel mem;
  HostSystem h(mem);
  MsgqMetadata m = h.metadata();
  m.fcn_backend_rw = h.kernel().fn_notify;
  h.set_metadata(m);
  const WriteEffect e = h.msgq_rx_mark_consumed(3);
  EXPECT_FALSE(e.write_addr);
  EXPECT_EQ(mem.cpu_read_u32(h.kernel().read_outgoing), 0u);
  EXPECT_EQ(h.kernel().invoked.front(), h.kernel().fn_notify);
}

TEST(MarkConsumed, InvalidFlushCrashesDriverOnly) {
  HostMemoryModel mem;
  HostSystem h(mem);
  MsgqMetadata m = h.metadata();
  m.fcn_flush = 0x1234;
  h.set_metadata(m);
  h.msgq_rx_mark_consumed(1);
  EXPECT_EQ(h.kernel().driver, DriverState::crashed);
  EXPECT_EQ(h.kernel().kernel, KernelState::stable);
  // A crashed driver takes no further messages.
  h.gsp_enqueue(1);
  EXPECT_EQ(h.driver_receive(), 0u);
}

TEST(MarkConsumed, WriteOutsideKernelPanics) {
  HostMemoryModel mem;
  HostSystem h(mem);
  MsgqMetadata m = h.metadata();
  m.p_read_outgoing = mem.layout().iova_base;
  h.set_metadata(m);
  const WriteEffect e = h.msgq_rx_mark_consumed(1);
  EXPECT_FALSE(e.write_addr);
  EXPECT_EQ(h.kernel().kernel, KernelState::panicked);
}

TEST(SeqScan, FormulaAndWraparound) {
  auto dump_with = [](std::vector<std::pair<std::uint32_t, std::uint32_t>> seqs) {
    std::vector<std::uint8_t> d(std::uint64_t{kQueueEntries} * kPage4K, 0);
    for (auto [i, s] : seqs) put32(d, i * kPage4K, s);
    return d;
  };
  const SeqScan a = scan_expected_seq(dump_with({{39, 999}, {40, 1000}, {41, 3}}));
  EXPECT_EQ(a.n, 41u);
  EXPECT_EQ(a.payload_index, 57u);
  EXPECT_EQ(a.expected_seq, 1001u);
  const SeqScan b = scan_expected_seq(dump_with({{62, 7}}));
  EXPECT_EQ(b.n, 0u);
  EXPECT_EQ(b.payload_index, 16u);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> same;
  for (std::uint32_t i = 5; i < 63; i += 7) same.push_back({i, 42});
  EXPECT_EQ(scan_expected_seq(dump_with(same)).n, 6u);
  EXPECT_THROW((void)scan_expected_seq(dump_with({})), DomainError);
  EXPECT_THROW((void)scan_expected_seq(std::vector<std::uint8_t>(100)), RangeError);
}

TEST(SeqScan, AgreesWithLiveQueue) {
  HostMemoryModel mem;
  HostSystem h(mem);
  // Attribute replies are single-entry messages.
  for (int i = 0; i < 100; ++i) {
    h.gsp_enqueue(1);
    if (i % 3 == 0) h.service();
  }
  h.service();
  const SeqScan s = scan_expected_seq(mem.cpu_read(h.queue_base(), std::uint64_t{kQueueEntries} * kPage4K));
  EXPECT_EQ(s.n, h.write_index());
  EXPECT_EQ(s.expected_seq, h.rx_seq());
}

TEST(FaultParse, CleanAndOutOfBounds) {
  const std::uint64_t base = 0x100000;
  FaultBufferEntry e{base + 5 * kPage4K, 2, 0, 0};
  const ParseOutcome ok = parse_fault_entry(e, ParseMode::release, 8, 8, base);
  EXPECT_EQ(ok.utlb_id, 2u);
  EXPECT_EQ(ok.page_index, 5u);

  e.gpc_id = 8;
  EXPECT_THROW((void)parse_fault_entry(e, ParseMode::debug, 8, 8, base), AssertionTriggered);
  try {
    (void)parse_fault_entry(e, ParseMode::release, 8, 8, base);
    ADD_FAILURE();
  } catch (const OobDetected& x) {
    EXPECT_EQ(x.field(), "utlb_id");
  }
  e.gpc_id = 1;
  e.fault_address = base - kPage4K;
  try {
    (void)parse_fault_entry(e, ParseMode::release, 8, 8, base);
    ADD_FAILURE();
  } catch (const OobDetected& x) {
    EXPECT_EQ(x.field(), "page_index");
  }
}

TEST(FaultParse, ExhaustiveGridAgainstOracle) {
  const std::uint64_t base = 0x7000'0000;
  const std::uint32_t utlbs = 40;
  for (std::uint32_t gpc = 0; gpc < 50; ++gpc) {
    for (int a = 0; a < 200; ++a) {
      const std::uint64_t addr = base - 40 * kPage4K + std::uint64_t(a) * 3 * kPage4K + a;
      const FaultBufferEntry e{addr, gpc, 0, 0};
      for (ParseMode mode : {ParseMode::debug, ParseMode::release}) {
        std::string want;
        if (gpc >= utlbs) want = mode == ParseMode::debug ? "assert" : "utlb_id";
        else if (addr < base || (addr - base) / kPage4K >= kPageMaskBits) want = "page_index";
        std::string got;
        try {
          const ParseOutcome o = parse_fault_entry(e, mode, utlbs, utlbs, base);
          EXPECT_EQ(o.page_index, (addr - base) / kPage4K);
          EXPECT_EQ(o.utlb_id, gpc);
        } catch (const AssertionTriggered&) {
          got = "assert";
        } catch (const OobDetected& x) {
          got = x.field();
        }
        EXPECT_EQ(got, want) << gpc << ' ' << addr;
      }
    }
  }
}

TEST(Driver, BenignTracesNeverTouchCredentials) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 300; ++t) {
    HostMemoryModel mem;
    HostSystem h(mem, {0.3, rng()});
    for (int op = 0; op < 200; ++op) {
      switch (rng() % 4) {
        case 0: h.gsp_enqueue(1 + rng() % kStagingEntries); break;
        case 1: h.device_attribute_query(); break;
        case 2: h.driver_receive(); break;
        default: h.service(); break;
      }
    }
    EXPECT_EQ(h.euid(), kInitialEuid);
    EXPECT_TRUE(h.metadata_intact());
    EXPECT_EQ(h.oversized_accepted(), 0u);
    EXPECT_EQ(h.kernel().driver, DriverState::alive);
  }
}

TEST(Privesc, OnePassWithDeterministicScheduler) {
  Rig r;
  const PrivescReport p = run_privesc(*r.dma, *r.g, *r.host, r.host->kernel().cred_addr);
  EXPECT_TRUE(p.success);
  EXPECT_EQ(p.attempts, 1u);
  EXPECT_EQ(p.euid_before, kInitialEuid);
  EXPECT_EQ(p.euid_after, 0u);
  EXPECT_EQ(p.driver_state, "crashed");
  EXPECT_EQ(p.kernel_state, "stable");
  EXPECT_TRUE(p.stable);
  EXPECT_EQ(r.host->oversized_accepted(), 1u);
}

TEST(Privesc, LeavingFlushZeroKeepsDriverAliveButUnstable) {
  Rig r;
  PrivescOptions o;
  o.crash_driver = false;
  const PrivescReport p = run_privesc(*r.dma, *r.g, *r.host, r.host->kernel().cred_addr, o);
  EXPECT_EQ(p.euid_after, 0u);
  EXPECT_EQ(p.driver_state, "alive");
  EXPECT_EQ(p.kernel_state, "stable");
  EXPECT_FALSE(p.stable);
  EXPECT_FALSE(r.host->metadata_intact());
}

TEST(Privesc, RacingDriverStillSucceedsWithRetries) {
  std::uint32_t total = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rig r({0.5, seed});
    const PrivescReport p = run_privesc(*r.dma, *r.g, *r.host, r.host->kernel().cred_addr);
    EXPECT_TRUE(p.success) << seed;
    EXPECT_EQ(p.kernel_state, "stable");
    total += p.attempts;
    // Escalation only ever follows an oversized message passing validation.
    EXPECT_EQ(r.host->oversized_accepted() > 0, p.euid_after == 0);
  }
  EXPECT_GE(total, 5u);
}

TEST(Privesc, DeviceCannotWriteKernelDirectly) {
  Rig r;
  const std::uint64_t cred = r.host->kernel().cred_addr + kEuidOffset;
  EXPECT_THROW(r.dma->write_u32(cred, 0), SimError);
  EXPECT_EQ(r.host->euid(), kInitialEuid);
}

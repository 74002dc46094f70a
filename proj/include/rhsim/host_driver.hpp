// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "rhsim/device_memory.hpp"
#include "rhsim/guest_api.hpp"

namespace rhsim {

class HostDma;

inline constexpr std::uint32_t kQueueEntries = 63;
inline constexpr std::uint64_t kQueueOffset = 0x42000;
inline constexpr std::uint32_t kStagingEntries = 16;
inline constexpr std::uint64_t kEuidOffset = 8;
inline constexpr std::uint32_t kInitialEuid = 1000;

/// Byte offsets inside the first entry of a queue message.
struct MsgHeader {
  static constexpr std::uint64_t seq = 0;
  static constexpr std::uint64_t elem_count = 4;
  static constexpr std::uint64_t checksum = 8;
  static constexpr std::uint64_t payload = 16;
};

/// Byte offsets of the queue metadata fields in kernel memory.
struct MetaField {
  static constexpr std::uint64_t p_read_outgoing = 0;
  static constexpr std::uint64_t rx_read_ptr = 8;
  static constexpr std::uint64_t msg_count = 12;
  static constexpr std::uint64_t fcn_notify = 16;
  static constexpr std::uint64_t fcn_notify_arg = 24;
  static constexpr std::uint64_t fcn_backend_rw = 32;
  static constexpr std::uint64_t fcn_flush = 40;
  static constexpr std::uint64_t fcn_barrier = 48;
  static constexpr std::uint64_t size = 56;
};

struct MsgqMetadata {
  std::uint64_t p_read_outgoing = 0;
  std::uint32_t rx_read_ptr = 0;
  std::uint32_t msg_count = 0;
  std::uint64_t fcn_notify = 0;
  std::uint64_t fcn_notify_arg = 0;
  std::uint64_t fcn_backend_rw = 0;
  std::uint64_t fcn_flush = 0;
  std::uint64_t fcn_barrier = 0;
  bool operator==(const MsgqMetadata&) const = default;

  [[nodiscard]] std::vector<std::uint8_t> bytes() const;
  [[nodiscard]] static MsgqMetadata parse(std::span<const std::uint8_t> b);
};

/// XOR of the little-endian 32-bit words of `msg`.
[[nodiscard]] std::uint32_t checksum32(std::span<const std::uint8_t> msg);

enum class DriverState : std::uint8_t { alive, crashed };
enum class KernelState : std::uint8_t { stable, panicked };
[[nodiscard]] const char* driver_state_name(DriverState s);
[[nodiscard]] const char* kernel_state_name(KernelState s);

/// Kernel memory layout plus the state the driver and kernel can be left in.
struct KernelModel {
  std::uint64_t staging = 0;
  std::uint64_t meta = 0;
  std::uint64_t read_outgoing = 0;  // legitimate target of the shared read pointer
  std::uint64_t cred_addr = 0;
  std::uint64_t fn_notify = 0, fn_flush = 0, fn_barrier = 0;
  std::set<std::uint64_t> functions;  // addresses that are valid code
  DriverState driver = DriverState::alive;
  KernelState kernel = KernelState::stable;
  std::vector<std::uint64_t> invoked;  // callback addresses called, in order
  std::string crash_reason;

  [[nodiscard]] static KernelModel standard(const HostLayout& l);
};

struct WriteEffect {
  std::uint32_t new_read_ptr = 0;
  std::optional<std::uint64_t> write_addr;  // set when the 4-byte write happened
  std::uint32_t written = 0;
};

/// Read-pointer update and outgoing write done after a message is consumed:
/// add n, subtract the message count once if reached, write out.
[[nodiscard]] std::uint32_t advance_read_ptr(std::uint32_t read_ptr, std::uint32_t msg_count,
                                             std::uint32_t n);

struct SeqScan {
  std::uint32_t n = 0;
  std::uint32_t payload_index = 0;
  std::uint32_t expected_seq = 0;
};

/// Locates where the next message goes from a dump of all queue entries.
/// Ties on the largest sequence go to the lowest index.
[[nodiscard]] SeqScan scan_expected_seq(std::span<const std::uint8_t> dump);

enum class ParseMode : std::uint8_t { debug, release };

struct FaultBufferEntry {
  std::uint64_t fault_address = 0;
  std::uint32_t gpc_id = 0;
  std::uint32_t client_id = 0;
  std::uint32_t fault_type = 0;
};

struct ParseOutcome {
  std::uint32_t utlb_id = 0;
  std::uint64_t page_index = 0;
};

class AssertionTriggered : public SimError {
 public:
  using SimError::SimError;
};

class OobDetected : public SimError {
 public:
  OobDetected(std::string field, const std::string& what) : SimError(what), field_(std::move(field)) {}
  [[nodiscard]] const std::string& field() const { return field_; }

 private:
  std::string field_;
};

inline constexpr std::uint64_t kPageMaskBits = 512;

/// Driver-side decoding of one replayable-fault buffer entry. Both uses of
/// the decoded indices are bounds-checked by the model.
ParseOutcome parse_fault_entry(const FaultBufferEntry& e, ParseMode mode, std::uint32_t num_gpcs,
                               std::uint32_t utlbs_len, std::uint64_t sub_batch_base);

struct HostConfig {
  double race_window = 0.0;  // chance the driver runs between a GSP write and the next step
  std::uint64_t seed = 1;
};

/// Host side: GSP message queue in the IOVA window, the driver that drains
/// it into a kernel staging buffer, and a kernel with a credential record.
class HostSystem : public GspProducer {
 public:
  HostSystem(HostMemoryModel& mem, HostConfig cfg = {});

  /// GSP answers one attribute query with a single-entry message.
  void device_attribute_query() override;
  /// Enqueues a well-formed message of `elem_count` entries.
  void gsp_enqueue(std::uint32_t elem_count);

  /// Driver handles the message at its read index. Returns entries consumed.
  std::uint32_t driver_receive();
  /// Runs the driver until it makes no progress.
  std::uint32_t service();
  WriteEffect msgq_rx_mark_consumed(std::uint32_t n);

  [[nodiscard]] std::uint64_t queue_base() const { return mem_.layout().iova_base + kQueueOffset; }
  [[nodiscard]] std::uint64_t entry_addr(std::uint32_t i) const {
    return queue_base() + std::uint64_t{i % kQueueEntries} * kPage4K;
  }
  [[nodiscard]] MsgqMetadata metadata() const;
  void set_metadata(const MsgqMetadata& m);
  [[nodiscard]] std::uint32_t euid() const;
  [[nodiscard]] std::uint32_t rx_avail() const { return rx_avail_; }
  [[nodiscard]] std::uint32_t rx_seq() const { return rx_seq_; }
  [[nodiscard]] std::uint32_t read_index() const { return read_idx_; }
  [[nodiscard]] std::uint32_t write_index() const { return write_idx_; }
  [[nodiscard]] KernelModel& kernel() { return k_; }
  [[nodiscard]] const KernelModel& kernel() const { return k_; }
  [[nodiscard]] HostMemoryModel& memory() { return mem_; }
  [[nodiscard]] std::uint64_t oversized_accepted() const { return oversized_accepted_; }
  [[nodiscard]] bool metadata_intact() const;

 private:
  void invoke(std::uint64_t fn);
  void maybe_race();

  HostMemoryModel& mem_;
  HostConfig cfg_;
  std::mt19937_64 rng_;
  KernelModel k_;
  MsgqMetadata initial_meta_;
  std::uint32_t write_idx_ = 0;
  std::uint32_t read_idx_ = 0;
  std::uint32_t rx_avail_ = 0;
  std::uint32_t next_seq_ = 1;
  std::uint32_t rx_seq_ = 1;
  std::uint64_t oversized_accepted_ = 0;
};

struct PrivescOptions {
  bool crash_driver = true;  // point fcnFlush at invalid code so the driver stops
  std::uint32_t max_attempts = 64;
};

struct PrivescReport {
  std::uint32_t attempts = 0;
  std::uint32_t euid_before = 0;
  std::uint32_t euid_after = 0;
  std::string driver_state;
  std::string kernel_state;
  bool stable = false;
  bool success = false;
  std::uint32_t queue_index = 0;
  std::uint32_t expected_seq = 0;
};

/// Crafted first entry (elemCount 17) and payload entry that become the
/// metadata; together their words fold to zero.
struct PrivescPayload {
  std::vector<std::uint8_t> head;
  std::vector<std::uint8_t> meta_entry;
};
[[nodiscard]] PrivescPayload build_privesc_payload(std::uint32_t seq, std::uint64_t target,
                                                   std::uint64_t flush_fn);

/// Queue-overflow escalation driven through device-side host access.
/// `host` is used only as the scheduler that lets the driver run.
PrivescReport run_privesc(HostDma& dma, GuestSession& g, HostSystem& host,
                          std::uint64_t cred_addr, PrivescOptions opt = {});

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rhsim/common.hpp"

namespace rhsim {

// ------------------------------------------------------------- code tamper

inline constexpr std::uint64_t kSlotBytes = 16;
inline constexpr std::uint64_t kCodePage = 2 * MiB;

enum class Opcode : std::uint8_t { other = 0, exit = 1, bra = 2, nop = 3 };

/// Binary kernel image made of 16-byte instruction slots. Byte 0 of a slot
/// is the opcode; bytes 8..15 hold a branch target address.
class CodeImage {
 public:
  struct Kernel {
    std::uint64_t first_slot;
    std::uint64_t end_slot;  // one past the EXIT/trap/NOP-sled tail
    std::uint32_t page;
  };

  explicit CodeImage(std::uint32_t pages);

  [[nodiscard]] std::uint32_t pages() const { return pages_; }
  [[nodiscard]] std::uint64_t slots() const { return bytes_.size() / kSlotBytes; }
  [[nodiscard]] Opcode opcode(std::uint64_t slot) const {
    return static_cast<Opcode>(bytes_[slot * kSlotBytes]);
  }
  [[nodiscard]] std::uint64_t target(std::uint64_t slot) const;
  void set(std::uint64_t slot, Opcode op, std::uint64_t target = 0);
  [[nodiscard]] std::span<const std::uint8_t> bytes() const { return bytes_; }
  [[nodiscard]] std::span<std::uint8_t> bytes() { return bytes_; }

  /// Kernel boundaries recovered from the EXIT, self-branch, NOP-sled tail.
  [[nodiscard]] std::vector<Kernel> kernels() const;
  /// Slots holding BRA instructions other than kernel-tail traps.
  [[nodiscard]] std::vector<std::uint64_t> branches(const Kernel& k) const;

 private:
  std::uint32_t pages_;
  std::vector<std::uint8_t> bytes_;
};

struct OracleResult {
  double accuracy = 0;
  double latency = 1.0;  // relative to the untampered run
  bool crashed = false;
  bool valid_output = true;
};

/// Synthetic model behaviour keyed on what was tampered in an image.
class AccuracyOracle {
 public:
  AccuracyOracle(const CodeImage& pristine, double baseline, std::vector<std::size_t> essential,
                 std::optional<std::size_t> critical_kernel, std::optional<std::uint64_t> critical_branch);

  /// Runs the benchmark on `image`. Each call counts as one run.
  OracleResult run(const CodeImage& image);
  [[nodiscard]] double baseline() const { return baseline_; }
  [[nodiscard]] std::uint32_t runs() const { return runs_; }
  [[nodiscard]] std::optional<std::uint64_t> critical_branch() const { return critical_branch_; }

 private:
  std::vector<CodeImage::Kernel> kernels_;
  double baseline_;
  std::vector<bool> essential_;
  std::optional<std::size_t> critical_kernel_;
  std::optional<std::uint64_t> critical_branch_;
  std::uint32_t runs_ = 0;
};

struct CodeLab {
  CodeImage image;
  AccuracyOracle oracle;
  std::uint64_t branch_count;
};

struct CodeLabParams {
  std::uint32_t pages = 16;
  std::uint32_t branches = 5436;
  std::uint32_t kernels_per_page = 8;
  std::uint32_t essential_pages = 4;
  bool plant = true;
  std::uint64_t seed = 1;
};

[[nodiscard]] CodeLab make_code_lab(const CodeLabParams& p);

struct PipelineResult {
  bool found = false;
  std::uint64_t critical_branch = 0;
  std::uint32_t runs_used = 0;
  std::uint32_t pages_kept = 0;
  double survivor_fraction = 0;  // branches left after the page stage
  OracleResult final_run;
};

/// Acceptance constraints for a degraded run.
[[nodiscard]] bool degraded_ok(const OracleResult& r, double threshold = 0.002);

/// Page, then kernel, then branch narrowing of the critical branch.
[[nodiscard]] PipelineResult filter_pipeline(CodeImage& image, AccuracyOracle& oracle,
                                             std::uint32_t budget);

// ------------------------------------------------------------- key race

/// Pages of a snapshot that are entirely zero while the pool was
/// prefilled with `prefill`.
[[nodiscard]] std::vector<std::uint64_t> find_candidates(std::span<const std::uint8_t> snapshot,
                                                         std::uint8_t prefill,
                                                         std::uint64_t page_size = kPage4K);

struct RaceParams {
  std::uint32_t candidates = 100;
  double dump_ms = 0.2;
  double residency_ms = 0.6;
  std::uint64_t trials = 100000;
};

struct RaceProbability {
  double p = 0;
  bool saturated = false;
};

[[nodiscard]] RaceProbability race_probability(const RaceParams& p);
/// Fraction of uniformly phased victim runs whose key page gets dumped.
[[nodiscard]] double run_key_race(const RaceParams& p, std::uint64_t seed);

// ------------------------------------------------------------- fingerprint

struct LayerStats {
  double mean = 0;
  double stddev = 0;
  double zero_fraction = 0;
};

struct LayerFingerprint {
  std::string label;
  std::vector<LayerStats> layers;
};

/// Per-stat normalization across every layer of a reference corpus.
struct StatNorm {
  std::array<double, 3> mean{};
  std::array<double, 3> scale{1, 1, 1};
};

using WeightDump = std::vector<std::vector<float>>;

[[nodiscard]] LayerFingerprint fingerprint(const WeightDump& dump, std::string label = {});
[[nodiscard]] StatNorm corpus_norm(std::span<const LayerFingerprint> refs);
[[nodiscard]] std::vector<double> normalized_vector(const LayerFingerprint& f, const StatNorm& n);
[[nodiscard]] double cosine(std::span<const double> a, std::span<const double> b);
/// Cosine of the normalized stat vectors, equal weight per stat.
[[nodiscard]] double similarity(const LayerFingerprint& a, const LayerFingerprint& b,
                                const StatNorm& n);
[[nodiscard]] std::string identify(const WeightDump& dump, std::span<const LayerFingerprint> refs);

struct FamilySpec {
  std::string label;
  std::vector<std::array<double, 3>> layer_params;  // mean, stddev, zero fraction
};

[[nodiscard]] FamilySpec random_family(std::string label, std::uint32_t layers, std::uint64_t seed);
[[nodiscard]] WeightDump sample_family(const FamilySpec& f, std::uint32_t per_layer,
                                       std::uint64_t seed);
/// Fine-tune proxy: every weight scaled by (1 + rel * N(0,1)).
[[nodiscard]] WeightDump perturb(const WeightDump& d, double rel, std::uint64_t seed);

}  // namespace rhsim

// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rhsim {

inline constexpr std::uint64_t KiB = 1024;
inline constexpr std::uint64_t MiB = 1024 * KiB;
inline constexpr std::uint64_t GiB = 1024 * MiB;

inline constexpr std::uint64_t kPage4K = 4 * KiB;
inline constexpr std::uint64_t kPage64K = 64 * KiB;
inline constexpr std::uint64_t kPage2M = 2 * MiB;
inline constexpr std::uint32_t kFramesPer64K = 16;
inline constexpr std::uint32_t kFramesPer2M = 512;
inline constexpr std::uint32_t kSlicesPer2M = 32;
inline constexpr std::uint32_t kNone = 0xFFFFFFFFu;

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RangeError : SimError {
  using SimError::SimError;
};
struct DomainError : SimError {
  using SimError::SimError;
};
struct IommuFault : SimError {
  using SimError::SimError;
};
struct TranslationFault : SimError {
  using SimError::SimError;
};
struct AllocationError : SimError {
  using SimError::SimError;
};
struct FaultError : SimError {
  using SimError::SimError;
};
struct AuditViolation : SimError {
  using SimError::SimError;
};
struct ConfigError : SimError {
  using SimError::SimError;
};

// FNV-1a, used for audit digests.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace rhsim

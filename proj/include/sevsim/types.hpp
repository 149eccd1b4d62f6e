#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sevsim {

using Asid = uint32_t;
using Gva = uint64_t;  // guest virtual, canonical 48-bit
using Gpa = uint64_t;  // guest physical, 48-bit, bit 47 = C-bit
using Spa = uint64_t;  // system physical, 48-bit, C-bit always stripped

inline constexpr uint64_t kPageSize = 0x1000;
inline constexpr uint64_t kPageMask = kPageSize - 1;
inline constexpr int kPhysAddrBits = 48;
inline constexpr int kCbitShift = 47;
inline constexpr uint64_t kCbitMask = 1ULL << kCbitShift;
inline constexpr uint64_t kPhysAddrMask = (1ULL << kPhysAddrBits) - 1;

// pfn field of a PTE: bits 51:12
inline constexpr uint64_t kPfnFieldMask = 0xFFFFFFFFFFULL;  // 40 bits
inline constexpr int kPfnShift = 12;
// C-bit position within the 40-bit pfn field (address bit 47 => pfn bit 35)
inline constexpr uint64_t kPfnCbitMask = 1ULL << (kCbitShift - kPfnShift);

inline constexpr uint64_t strip_cbit(uint64_t addr) { return addr & ~kCbitMask; }
inline constexpr uint64_t page_of(uint64_t addr) { return addr & ~kPageMask; }
inline constexpr uint64_t pfn_of(uint64_t addr) { return (addr & kPhysAddrMask) >> kPfnShift; }

inline constexpr bool is_canonical(Gva va) {
  int64_t s = static_cast<int64_t>(va);
  return (s << 16 >> 16) == s;
}

enum class Err {
  UnknownAsid,
  AsidAlreadyActive,
  WbinvdRequired,
  DfflushRequired,
  IllegalAsidRange,
  PoolExhausted,
  NonCanonicalAddress,
  UnalignedOffset,
  NotLeakable,
  UnalignedAddress,
  SevEsUnsupported,
  VmCrashed,
  VmRelaunchNeeded,
  GadgetNotFound,
  InputTooShort,
  ConfigParseError,
  IntegrityError,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::UnknownAsid: return "UnknownAsid";
    case Err::AsidAlreadyActive: return "AsidAlreadyActive";
    case Err::WbinvdRequired: return "WBINVD_REQUIRED";
    case Err::DfflushRequired: return "DFFLUSH_REQUIRED";
    case Err::IllegalAsidRange: return "IllegalAsidRange";
    case Err::PoolExhausted: return "PoolExhausted";
    case Err::NonCanonicalAddress: return "NonCanonicalAddress";
    case Err::UnalignedOffset: return "UnalignedOffset";
    case Err::NotLeakable: return "NotLeakable";
    case Err::UnalignedAddress: return "UnalignedAddress";
    case Err::SevEsUnsupported: return "SevEsUnsupported";
    case Err::VmCrashed: return "VmCrashed";
    case Err::VmRelaunchNeeded: return "VmRelaunchNeeded";
    case Err::GadgetNotFound: return "GadgetNotFound";
    case Err::InputTooShort: return "InputTooShort";
    case Err::ConfigParseError: return "ConfigParseError";
    case Err::IntegrityError: return "IntegrityError";
  }
  return "?";
}

struct Error : std::runtime_error {
  Err kind;
  explicit Error(Err k, const std::string& detail = "")
      : std::runtime_error(std::string(err_name(k)) + (detail.empty() ? "" : ": " + detail)),
        kind(k) {}
};

// splitmix64: the deterministic PRNG used for all seeded material.
// Stable across platforms, unlike <random> distributions.
struct SplitMix64 {
  uint64_t state;
  explicit SplitMix64(uint64_t seed) : state(seed) {}
  uint64_t next() {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  // unbiased enough for simulation purposes
  uint64_t below(uint64_t bound) { return next() % bound; }
};

struct U128 {
  uint64_t lo = 0;
  uint64_t hi = 0;
  friend U128 operator^(U128 a, U128 b) { return {a.lo ^ b.lo, a.hi ^ b.hi}; }
  U128& operator^=(U128 o) {
    lo ^= o.lo;
    hi ^= o.hi;
    return *this;
  }
  friend bool operator==(U128 a, U128 b) { return a.lo == b.lo && a.hi == b.hi; }
  friend bool operator!=(U128 a, U128 b) { return !(a == b); }
};

// FNV-1a over arbitrary bytes; used for VMSA digests and golden comparisons.
inline uint64_t fnv1a64(const uint8_t* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  for (size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sevsim

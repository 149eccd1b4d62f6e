#pragma once

// Guest/nested page-table structures, the leakability predicate for 8-byte
// blocks interpreted as PTEs, and the nRIP offset-selection arithmetic.

#include <map>
#include <optional>
#include <variant>

#include "sevsim/types.hpp"

namespace sevsim {

// Raw 64-bit guest page-table entry with derived bit views.
struct Pte {
  uint64_t raw = 0;

  bool present() const { return raw & 1; }
  bool ps() const { return raw & (1ULL << 7); }
  bool g() const { return raw & (1ULL << 8); }
  bool cbit() const { return raw & kCbitMask; }
  uint64_t pfn() const { return (raw >> kPfnShift) & kPfnFieldMask; }
  uint64_t reserved_48_62() const { return (raw >> 48) & 0x7FFF; }

  static Pte make(uint64_t pfn, bool present = true, bool cbit = true, bool ps = false,
                  bool g = false) {
    uint64_t raw = (pfn & kPfnFieldMask) << kPfnShift;
    if (present) raw |= 1;
    if (ps) raw |= 1ULL << 7;
    if (g) raw |= 1ULL << 8;
    if (cbit) raw |= kCbitMask;
    return Pte{raw};
  }
};

// Present bit set, reserved bits 62:48 clear, and (unless faulting at the
// last level) PS and G both clear.
inline bool pte_is_leakable(uint64_t block, bool last_level) {
  Pte p{block};
  if (!p.present()) return false;
  if (p.reserved_48_62() != 0) return false;
  if (!last_level && (p.ps() || p.g())) return false;
  return true;
}

// pfn field with the C-bit (address bit 47 => pfn bit 35) cleared.
inline uint64_t decode_leaked_gpa(uint64_t block) {
  if (!pte_is_leakable(block, true)) throw Error(Err::NotLeakable);
  return Pte{block}.pfn() & ~kPfnCbitMask;
}

// nRIP whose bits 47:39 index the chosen 8-aligned page offset; offsets in
// the upper half of the page need a kernel-half canonical address.
inline Gva choose_nrip(uint64_t target_offset) {
  if (target_offset >= kPageSize || (target_offset & 7)) throw Error(Err::UnalignedOffset);
  uint64_t idx = target_offset / 8;
  Gva nrip = (target_offset < 0x800) ? 0x8000000000ULL * idx
                                     : 0xffff000000000000ULL + 0x8000000000ULL * idx;
  return nrip;
}

// Virtual address walking top-down through the given 9-bit table indices.
inline Gva gva_from_indices(uint64_t i1, uint64_t i2, uint64_t i3, uint64_t i4,
                            uint64_t page_offset = 0) {
  Gva va = (i1 << 39) | (i2 << 30) | (i3 << 21) | (i4 << 12) | page_offset;
  if (va & (1ULL << 47)) va |= 0xFFFF000000000000ULL;  // sign-extend
  return va;
}

inline uint64_t walk_index(Gva va, int level) {  // level 1..4
  return (va >> (39 - 9 * (level - 1))) & 0x1FF;
}

struct NptEntry {
  bool present = false;
  uint64_t spfn = 0;
  bool nc = false;
};

struct NestedPageFault {
  Gpa faulting_gpa = 0;
};

// Hypervisor-owned gPA -> sPA map, 4 KB granularity.
class NestedPageTable {
 public:
  void map(Gpa gpa, Spa spa, bool nc = false) {
    entries_[pfn_of(strip_cbit(gpa))] = NptEntry{true, pfn_of(spa), nc};
  }

  void unmap(Gpa gpa) { entries_.erase(pfn_of(strip_cbit(gpa))); }

  NptEntry* find(Gpa gpa) {
    auto it = entries_.find(pfn_of(strip_cbit(gpa)));
    return it == entries_.end() ? nullptr : &it->second;
  }
  const NptEntry* find(Gpa gpa) const {
    auto it = entries_.find(pfn_of(strip_cbit(gpa)));
    return it == entries_.end() ? nullptr : &it->second;
  }

  void clear_present_bits() {
    for (auto& [pfn, e] : entries_) e.present = false;
  }

  void restore_present_bits() {
    for (auto& [pfn, e] : entries_) e.present = true;
  }

  std::map<uint64_t, NptEntry>& entries() { return entries_; }
  const std::map<uint64_t, NptEntry>& entries() const { return entries_; }

 private:
  std::map<uint64_t, NptEntry> entries_;  // gpfn -> entry
};

// sPA (plus low bits of the faulting gPA) on success; NPF is the contract,
// not an error, so it travels in the variant.
inline std::variant<Spa, NestedPageFault> nested_translate(Gpa gpa, const NestedPageTable& npt) {
  Gpa stripped = strip_cbit(gpa) & kPhysAddrMask;
  const NptEntry* e = npt.find(stripped);
  if (!e || !e->present) return NestedPageFault{stripped};
  return Spa{(e->spfn << kPfnShift) | (stripped & kPageMask)};
}

inline bool npt_nc_bit(Gpa gpa, const NestedPageTable& npt) {
  const NptEntry* e = npt.find(strip_cbit(gpa));
  return e && e->nc;
}

}  // namespace sevsim

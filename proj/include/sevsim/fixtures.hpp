#pragma once

// Synthetic guest images used by scenarios and tests: random pages, pages of
// plausible PTEs, victim binaries with planted mov gadgets, and the small
// instruction loops the TLB and coverage experiments need.

#include <vector>

#include "sevsim/paging.hpp"
#include "sevsim/types.hpp"

namespace sevsim::fixtures {

inline std::vector<uint8_t> random_page(SplitMix64& rng) {
  std::vector<uint8_t> page(kPageSize);
  for (size_t i = 0; i < kPageSize; i += 8) {
    uint64_t v = rng.next();
    std::memcpy(page.data() + i, &v, 8);
  }
  return page;
}

// One plausible leaf PTE: present, reserved bits clear, random pfn below the
// stripped physical range, random C-bit.
inline uint64_t random_valid_pte(SplitMix64& rng, bool allow_ps_g = false) {
  uint64_t pfn = rng.below(1ULL << 35);
  bool cbit = rng.next() & 1;
  bool ps = allow_ps_g && (rng.next() & 1);
  bool g = allow_ps_g && (rng.next() & 1);
  return Pte::make(pfn, true, cbit, ps, g).raw;
}

inline std::vector<uint8_t> valid_pte_page(SplitMix64& rng) {
  std::vector<uint8_t> page(kPageSize);
  for (size_t i = 0; i < kPageSize; i += 8) {
    uint64_t v = random_valid_pte(rng);
    std::memcpy(page.data() + i, &v, 8);
  }
  return page;
}

// default gadget placement mirrors the reference sshd offsets
inline constexpr uint64_t kLoadGadgetOffset = 0xca9a;   // 48 8b 03: mov (%rbx),%rax
inline constexpr uint64_t kStoreGadgetOffset = 0xca18;  // 49 89 04 24: mov %rax,(%r12)
inline constexpr uint64_t kR15SmokeOffset = 0x1000;     // 41 bf e4 07 00 00

// Zero-filled image with the two mov gadgets and a mov-imm smoke instruction
// planted; zero fill keeps accidental pattern matches out of the way.
inline std::vector<uint8_t> victim_binary(size_t size = 0x10000,
                                          uint64_t load_off = kLoadGadgetOffset,
                                          uint64_t store_off = kStoreGadgetOffset) {
  std::vector<uint8_t> bin(size, 0);
  const uint8_t load[] = {0x48, 0x8B, 0x03};
  const uint8_t store[] = {0x49, 0x89, 0x04, 0x24};
  const uint8_t smoke[] = {0x41, 0xBF, 0xE4, 0x07, 0x00, 0x00};  // movl $2020,%r15d
  std::memcpy(bin.data() + load_off, load, sizeof(load));
  std::memcpy(bin.data() + store_off, store, sizeof(store));
  if (kR15SmokeOffset + sizeof(smoke) <= size)
    std::memcpy(bin.data() + kR15SmokeOffset, smoke, sizeof(smoke));
  return bin;
}

// movl $0x7e4,%r11d ; movl $0x7e4,%r12d ; cpuid ; jmp back
inline std::vector<uint8_t> probe_loop_page() {
  std::vector<uint8_t> page(kPageSize, 0);
  const uint8_t code[] = {0x41, 0xBB, 0xE4, 0x07, 0x00, 0x00,   // mov $0x7e4,%r11d
                          0x41, 0xBC, 0xE4, 0x07, 0x00, 0x00,   // mov $0x7e4,%r12d
                          0x0F, 0xA2,                            // cpuid
                          0xEB, 0xF0};                           // jmp -16
  std::memcpy(page.data(), code, sizeof(code));
  return page;
}

// Pages of short forward jumps: rip advances 0x80 bytes per retired
// instruction and crosses one page every 32 instructions. The campaign
// workload strings `pages` of these together.
inline std::vector<uint8_t> jump_stride_region(size_t pages) {
  std::vector<uint8_t> region(pages * kPageSize, 0);
  for (size_t p = 0; p < pages; ++p)
    for (size_t off = 0; off < kPageSize; off += 0x80) {
      region[p * kPageSize + off] = 0xEB;
      region[p * kPageSize + off + 1] = 0x7E;
    }
  return region;
}

// A short program: load the planted values then hit CPUID as a completion
// marker. Used as the SEV-ES victim workload.
inline std::vector<uint8_t> mov_then_cpuid_page(uint32_t marker = 0x1111) {
  std::vector<uint8_t> page(kPageSize, 0);
  std::vector<uint8_t> code;
  for (int r = 0; r < 4; ++r) {  // mov $marker+r, %eax..%edx
    code.push_back(0xB8 + r);
    uint32_t v = marker + r;
    for (int b = 0; b < 4; ++b) code.push_back((v >> (8 * b)) & 0xFF);
  }
  code.push_back(0x0F);
  code.push_back(0xA2);
  std::memcpy(page.data(), code.data(), code.size());
  return page;
}

}  // namespace sevsim::fixtures

#pragma once

// Static binary-corpus analysis: what fraction of a file's 8-aligned blocks
// would pass the PTE plausibility test, and where the usable mov gadgets sit.
// Pure over the input bytes; no simulator state involved.

#include <cstring>
#include <string>
#include <vector>

#include "sevsim/paging.hpp"
#include "sevsim/types.hpp"

namespace sevsim {

struct GadgetHit {
  uint64_t offset = 0;
  size_t pattern_id = 0;
};

struct ScanReport {
  std::string file_id;
  uint64_t total_blocks = 0;
  uint64_t leakable_blocks = 0;
  double fraction = 0.0;
  std::vector<uint64_t> leakable_offsets;  // 8-aligned file offsets
  std::vector<GadgetHit> gadget_hits;
};

// Byte pattern with optional wildcards; value -1 matches any byte.
struct BytePattern {
  std::vector<int> bytes;
};

// "488b03" or "48??03"; pairs of hex digits, "??" wildcard.
inline BytePattern parse_hex_pattern(const std::string& s) {
  if (s.size() % 2) throw Error(Err::ConfigParseError, "odd-length hex pattern");
  BytePattern p;
  for (size_t i = 0; i < s.size(); i += 2) {
    if (s[i] == '?' && s[i + 1] == '?') {
      p.bytes.push_back(-1);
      continue;
    }
    auto nib = [&](char c) -> int {
      if (c >= '0' && c <= '9') return c - '0';
      if (c >= 'a' && c <= 'f') return c - 'a' + 10;
      if (c >= 'A' && c <= 'F') return c - 'A' + 10;
      throw Error(Err::ConfigParseError, "bad hex digit in pattern");
    };
    p.bytes.push_back(nib(s[i]) * 16 + nib(s[i + 1]));
  }
  return p;
}

// The two 3-4 byte encodings v2 needs: mov (%rbx),%rax and mov %rax,(%r12).
inline std::vector<BytePattern> default_gadget_patterns() {
  return {parse_hex_pattern("488b03"), parse_hex_pattern("49890424")};
}

inline ScanReport scan_pte_fraction(const uint8_t* data, size_t n, bool last_level,
                                    const std::string& file_id = "") {
  if (n < 8) throw Error(Err::InputTooShort);
  ScanReport r;
  r.file_id = file_id;
  r.total_blocks = n / 8;
  for (uint64_t i = 0; i < r.total_blocks; ++i) {
    uint64_t block;
    std::memcpy(&block, data + i * 8, 8);
    if (pte_is_leakable(block, last_level)) {
      ++r.leakable_blocks;
      r.leakable_offsets.push_back(i * 8);
    }
  }
  r.fraction = static_cast<double>(r.leakable_blocks) / static_cast<double>(r.total_blocks);
  return r;
}

inline ScanReport scan_pte_fraction(const std::vector<uint8_t>& bytes, bool last_level,
                                    const std::string& file_id = "") {
  return scan_pte_fraction(bytes.data(), bytes.size(), last_level, file_id);
}

// All match offsets, ascending, overlaps allowed.
inline std::vector<GadgetHit> scan_gadgets(const uint8_t* data, size_t n,
                                           const std::vector<BytePattern>& patterns) {
  std::vector<GadgetHit> hits;
  for (size_t off = 0; off < n; ++off) {
    for (size_t pid = 0; pid < patterns.size(); ++pid) {
      const auto& p = patterns[pid].bytes;
      if (p.empty() || off + p.size() > n) continue;
      bool match = true;
      for (size_t j = 0; j < p.size(); ++j) {
        if (p[j] >= 0 && data[off + j] != p[j]) {
          match = false;
          break;
        }
      }
      if (match) hits.push_back({off, pid});
    }
  }
  return hits;
}

inline std::vector<GadgetHit> scan_gadgets(const std::vector<uint8_t>& bytes,
                                           const std::vector<BytePattern>& patterns) {
  return scan_gadgets(bytes.data(), bytes.size(), patterns);
}

}  // namespace sevsim

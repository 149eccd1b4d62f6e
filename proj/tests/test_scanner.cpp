#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "sevsim/fixtures.hpp"
#include "sevsim/scanner.hpp"

using namespace sevsim;

namespace {

// byte-by-byte reference implementation, independent of the production path
ScanReport naive_scan(const std::vector<uint8_t>& bytes, bool last_level) {
  ScanReport r;
  r.total_blocks = bytes.size() / 8;
  for (uint64_t i = 0; i + 8 <= bytes.size(); i += 8) {
    uint64_t b = 0;
    for (int j = 7; j >= 0; --j) b = (b << 8) | bytes[i + j];
    bool present = b & 1;
    bool reserved = (b >> 48) & 0x7FFF;
    bool psg = (b >> 7) & 3;
    if (present && !reserved && (last_level || !psg)) {
      ++r.leakable_blocks;
      r.leakable_offsets.push_back(i);
    }
  }
  r.fraction = double(r.leakable_blocks) / double(r.total_blocks);
  return r;
}

std::vector<uint8_t> random_bytes(SplitMix64& rng, size_t n) {
  std::vector<uint8_t> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = uint8_t(rng.next());
  return v;
}

}  // namespace

TEST_CASE("fraction scan agrees with a naive reference on 100 random fixtures") {
  SplitMix64 rng(11);
  for (int i = 0; i < 100; ++i) {
    auto bytes = random_bytes(rng, 8 + rng.below(8192));
    for (bool last : {false, true}) {
      ScanReport got = scan_pte_fraction(bytes, last);
      ScanReport want = naive_scan(bytes, last);
      CHECK(got.total_blocks == want.total_blocks);
      CHECK(got.leakable_blocks == want.leakable_blocks);
      CHECK(got.leakable_offsets == want.leakable_offsets);
      CHECK(got.fraction == want.fraction);
    }
  }
}

TEST_CASE("all-zero input has fraction zero") {
  std::vector<uint8_t> zeros(4096, 0);
  CHECK(scan_pte_fraction(zeros, false).fraction == 0.0);
}

TEST_CASE("planted fraction is exact: 37 valid entries in 10000 blocks") {
  SplitMix64 rng(12);
  std::vector<uint8_t> bytes(10000 * 8, 0);
  std::set<uint64_t> slots;
  while (slots.size() < 37) slots.insert(rng.below(10000));
  for (uint64_t s : slots) {
    uint64_t pte = fixtures::random_valid_pte(rng);
    std::memcpy(bytes.data() + s * 8, &pte, 8);
  }
  ScanReport r = scan_pte_fraction(bytes, false);
  CHECK(r.total_blocks == 10000);
  CHECK(r.leakable_blocks == 37);
  CHECK(r.fraction == 0.0037);
}

TEST_CASE("uniform random blocks pass at roughly 2^-16 (last level)") {
  // present bit and the 15 reserved bits decide; expect 1/65536
  SplitMix64 rng(13);
  const uint64_t blocks = 10'000'000;
  uint64_t hits = 0;
  std::vector<uint8_t> chunk(1 << 16);
  for (uint64_t done = 0; done < blocks * 8; done += chunk.size()) {
    for (size_t i = 0; i < chunk.size(); i += 8) {
      uint64_t v = rng.next();
      std::memcpy(chunk.data() + i, &v, 8);
    }
    hits += scan_pte_fraction(chunk, true).leakable_blocks;
  }
  double fraction = double(hits) / double(blocks);
  double expect = 1.0 / 65536.0;
  CHECK(fraction > expect * 0.5);
  CHECK(fraction < expect * 1.5);
}

TEST_CASE("inputs shorter than one block are rejected") {
  std::vector<uint8_t> tiny(7, 0);
  try {
    scan_pte_fraction(tiny, false);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind == Err::InputTooShort);
  }
}

TEST_CASE("pattern parsing handles wildcards and rejects odd lengths") {
  BytePattern p = parse_hex_pattern("48??03");
  REQUIRE(p.bytes.size() == 3);
  CHECK(p.bytes[0] == 0x48);
  CHECK(p.bytes[1] == -1);
  CHECK(p.bytes[2] == 0x03);
  CHECK_THROWS_AS(parse_hex_pattern("48?"), Error);
  CHECK_THROWS_AS(parse_hex_pattern("4z"), Error);
}

TEST_CASE("gadget search finds the planted encodings at their file offsets") {
  auto bin = fixtures::victim_binary();
  auto hits = scan_gadgets(bin, default_gadget_patterns());
  bool load_hit = false, store_hit = false;
  for (const auto& h : hits) {
    if (h.pattern_id == 0 && h.offset == fixtures::kLoadGadgetOffset) load_hit = true;
    if (h.pattern_id == 1 && h.offset == fixtures::kStoreGadgetOffset) store_hit = true;
  }
  CHECK(load_hit);
  CHECK(store_hit);
}

TEST_CASE("repeated patterns report every occurrence in ascending order") {
  std::vector<uint8_t> bytes(0x1000, 0);
  const uint8_t pat[] = {0x48, 0x8B, 0x03};
  for (uint64_t off : {0x10ULL, 0x200ULL, 0xF00ULL}) std::memcpy(bytes.data() + off, pat, 3);
  auto hits = scan_gadgets(bytes, {parse_hex_pattern("488b03")});
  REQUIRE(hits.size() == 3);
  CHECK(hits[0].offset == 0x10);
  CHECK(hits[1].offset == 0x200);
  CHECK(hits[2].offset == 0xF00);
}

TEST_CASE("overlapping matches are all reported") {
  std::vector<uint8_t> bytes{0xAA, 0xAA, 0xAA, 0xAA};
  auto hits = scan_gadgets(bytes, {parse_hex_pattern("aaaa")});
  CHECK(hits.size() == 3);
}

TEST_CASE("empty pattern list yields no hits") {
  std::vector<uint8_t> bytes(64, 0x48);
  CHECK(scan_gadgets(bytes, {}).empty());
  // an empty pattern itself never matches either
  CHECK(scan_gadgets(bytes, {BytePattern{}}).empty());
}

TEST_CASE("identical input produces identical reports") {
  SplitMix64 rng(14);
  auto bytes = random_bytes(rng, 4096);
  ScanReport a = scan_pte_fraction(bytes, true, "x");
  ScanReport b = scan_pte_fraction(bytes, true, "x");
  CHECK(a.leakable_offsets == b.leakable_offsets);
  CHECK(a.fraction == b.fraction);
}

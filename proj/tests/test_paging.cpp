#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sevsim/fixtures.hpp"
#include "sevsim/hypervisor.hpp"
#include "sevsim/paging.hpp"

using namespace sevsim;

namespace {

// independent restatement of the plausibility rule, bit tests only
bool naive_leakable(uint64_t b, bool last) {
  bool present = b & 1ULL;
  bool reserved = ((b >> 48) & 0x7FFFULL) != 0;
  bool ps = (b >> 7) & 1ULL;
  bool g = (b >> 8) & 1ULL;
  if (!present || reserved) return false;
  if (!last && (ps || g)) return false;
  return true;
}

}  // namespace

TEST_CASE("worked examples decode to the documented frame numbers") {
  CHECK(pte_is_leakable(0x0000f12345678e7fULL, false));
  CHECK(decode_leaked_gpa(0x0000f12345678e7fULL) == 0x712345678ULL);
  CHECK(pte_is_leakable(0x00000abcdef12001ULL, false));
  CHECK(decode_leaked_gpa(0x00000abcdef12001ULL) == 0xabcdef12ULL);
}

TEST_CASE("plausibility rejects missing present bit and reserved bits") {
  CHECK_FALSE(pte_is_leakable(0x0, false));
  CHECK_FALSE(pte_is_leakable(0x0004000000000001ULL, false));  // bit 50 set
  CHECK(pte_is_leakable(0x1, false));
}

TEST_CASE("PS and G only disqualify above the last level") {
  uint64_t ps = Pte::make(0x123, true, false, true, false).raw;
  uint64_t g = Pte::make(0x123, true, false, false, true).raw;
  CHECK_FALSE(pte_is_leakable(ps, false));
  CHECK_FALSE(pte_is_leakable(g, false));
  CHECK(pte_is_leakable(ps, true));
  CHECK(pte_is_leakable(g, true));
}

TEST_CASE("plausibility agrees with a brute-force bit oracle") {
  SplitMix64 rng(77);
  // sweep the full cross product of the deciding bits inside random blocks
  for (int present = 0; present < 2; ++present) {
    for (int ps = 0; ps < 2; ++ps) {
      for (int g = 0; g < 2; ++g) {
        for (uint32_t res = 0; res < (1u << 15); res += 1 + (res >> 6)) {
          uint64_t b = rng.next();
          b = (b & ~1ULL) | present;
          b = (b & ~(1ULL << 7)) | (uint64_t(ps) << 7);
          b = (b & ~(1ULL << 8)) | (uint64_t(g) << 8);
          b = (b & ~(0x7FFFULL << 48)) | (uint64_t(res) << 48);
          CHECK(pte_is_leakable(b, false) == naive_leakable(b, false));
          CHECK(pte_is_leakable(b, true) == naive_leakable(b, true));
        }
      }
    }
  }
}

TEST_CASE("decode of an encoded frame number is the identity with bit 35 cleared") {
  SplitMix64 rng(5);
  for (int i = 0; i < 10000; ++i) {
    // 36-bit frame numbers: anything wider spills into the reserved field
    uint64_t pfn = rng.next() & (kPfnCbitMask | (kPfnCbitMask - 1));
    uint64_t raw = Pte::make(pfn, true, rng.next() & 1).raw;
    // Pte::make folds the mode bit into pfn bit 35; decode must clear it
    CHECK(decode_leaked_gpa(raw) == ((pfn | (Pte{raw}.cbit() ? kPfnCbitMask : 0)) & ~kPfnCbitMask));
  }
}

TEST_CASE("decode refuses implausible blocks") {
  CHECK_THROWS_AS(decode_leaked_gpa(0x0), Error);
  try {
    decode_leaked_gpa(0x0);
  } catch (const Error& e) {
    CHECK(e.kind == Err::NotLeakable);
  }
  CHECK(decode_leaked_gpa(0x1) == 0);
}

TEST_CASE("resume-address selection covers all 512 offsets") {
  for (uint64_t off = 0; off < kPageSize; off += 8) {
    Gva nrip = choose_nrip(off);
    CHECK(is_canonical(nrip));
    CHECK(walk_index(nrip, 1) == off / 8);
    // the lower-level indices are zero, so a first-level fault address is
    // exactly table_base | off
    CHECK(walk_index(nrip, 2) == 0);
    CHECK(walk_index(nrip, 3) == 0);
    CHECK(walk_index(nrip, 4) == 0);
  }
}

TEST_CASE("resume-address selection examples") {
  CHECK(choose_nrip(0x0) == 0x0);
  CHECK(choose_nrip(0x10) == 0x10000000000ULL);
  CHECK(choose_nrip(0x800) == 0xffff800000000000ULL);
}

TEST_CASE("resume-address selection rejects bad offsets") {
  for (uint64_t off : {0x4ULL, 0x7ULL, 0x1000ULL, 0x1008ULL}) {
    try {
      choose_nrip(off);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.kind == Err::UnalignedOffset);
    }
  }
}

TEST_CASE("index composition and extraction are inverses") {
  SplitMix64 rng(9);
  for (int i = 0; i < 1000; ++i) {
    uint64_t i1 = rng.below(512), i2 = rng.below(512), i3 = rng.below(512), i4 = rng.below(512);
    Gva va = gva_from_indices(i1, i2, i3, i4, 0x88);
    CHECK(is_canonical(va));
    CHECK(walk_index(va, 1) == i1);
    CHECK(walk_index(va, 2) == i2);
    CHECK(walk_index(va, 3) == i3);
    CHECK(walk_index(va, 4) == i4);
    CHECK((va & kPageMask) == 0x88);
  }
}

TEST_CASE("nested translation honors present bits and remaps") {
  NestedPageTable npt;
  npt.map(0x5000, 0x5000);
  CHECK(std::get<Spa>(nested_translate(0x5000, npt)) == 0x5000);
  CHECK(std::get<Spa>(nested_translate(0x5123, npt)) == 0x5123);

  npt.clear_present_bits();
  auto miss = nested_translate(0x5000, npt);
  CHECK(std::get<NestedPageFault>(miss).faulting_gpa == 0x5000);
  npt.restore_present_bits();

  npt.map(0x5000, 0x9000);
  CHECK(std::get<Spa>(nested_translate(0x5000, npt)) == 0x9000);
  // the encrypted-mode address bit is not part of the frame key
  CHECK(std::get<Spa>(nested_translate(kCbitMask | 0x5000, npt)) == 0x9000);

  npt.unmap(0x5000);
  CHECK(std::holds_alternative<NestedPageFault>(nested_translate(0x5000, npt)));
}

TEST_CASE("a guest walking its own tables never faults and lands on its frames") {
  MachineConfig mc;
  Machine m(mc);
  Hypervisor hv(m);
  SplitMix64 rng(123);

  VmLaunchConfig vc;
  vc.sev_class = SevClass::Sev;
  for (Gva base : {Gva{0x400000}, Gva{0x40000000}, gva_from_indices(3, 1, 2, 9)})
    vc.mappings.push_back({base, fixtures::random_page(rng), true, false});
  vc.entry_rip = 0x400000;
  GuestVm& vm = hv.launch_vm(vc);

  WalkContext ctx{vm.ground_truth.gcr3, &vm.npt, vm.asid, true};
  for (const auto& [gva, spfn] : vm.page_spfn) {
    for (uint64_t off : {0ULL, 8ULL, 0xFF8ULL}) {
      WalkResult r = m.guest_walk(gva + off, ctx);
      REQUIRE(std::holds_alternative<WalkSuccess>(r));
      CHECK(std::get<WalkSuccess>(r).spa == ((spfn << kPfnShift) | off));
    }
  }
}

TEST_CASE("a wrong-key walk of valid tables faults on junk entries") {
  MachineConfig mc;
  Machine m(mc);
  Hypervisor hv(m);
  SplitMix64 rng(124);

  VmLaunchConfig vc;
  vc.sev_class = SevClass::Sev;
  vc.mappings.push_back({0x400000, fixtures::random_page(rng), true, false});
  vc.entry_rip = 0x400000;
  GuestVm& victim = hv.launch_vm(vc);
  GuestVm& other = hv.launch_vm(vc);

  WalkContext ctx{victim.ground_truth.gcr3, &victim.npt, other.asid, true};
  WalkResult r = m.guest_walk(0x400000, ctx);
  CHECK(std::holds_alternative<GuestPageFault>(r));
}

TEST_CASE("non-canonical addresses are rejected up front") {
  NestedPageTable npt;
  MachineConfig mc;
  Machine m(mc);
  WalkContext ctx{0, &npt, 1, true};
  CHECK_THROWS_AS(m.guest_walk(0x0000800000000000ULL, ctx), Error);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sevsim/attacks.hpp"
#include "sevsim/fixtures.hpp"
#include "sevsim/scenarios.hpp"

using namespace sevsim;

namespace {

struct Rig {
  Machine m;
  Hypervisor hv;
  explicit Rig(uint64_t seed, bool snp = false) : m(make_config(seed, snp)), hv(m) {}
  static MachineConfig make_config(uint64_t seed, bool snp) {
    MachineConfig mc;
    mc.tweak_seed = seed * 2 + 1;
    mc.key_seed = seed * 3 + 7;
    mc.snp_mode = snp;
    return mc;
  }
};

GuestVm& launch_victim_with_pages(Hypervisor& hv, SplitMix64& rng, size_t pages,
                                  SevClass cls = SevClass::Sev) {
  VmLaunchConfig vc;
  vc.sev_class = cls;
  vc.mappings.push_back({0x400000, fixtures::mov_then_cpuid_page(), true, false});
  const Gva bases[] = {0x500000, 0x40000000, 0x8000000000};
  for (size_t i = 0; i < pages; ++i)
    vc.mappings.push_back(
        {bases[i % 3] + (i / 3) * kPageSize, fixtures::random_page(rng), true, false});
  vc.entry_rip = 0x400000;
  vc.idtr_base = 0x400000;
  return hv.launch_vm(vc);
}

}  // namespace

TEST_CASE("block reads succeed exactly on plausible table entries, 10^4 blocks") {
  Rig rig(1001);
  SplitMix64 rng(1001);
  // 20 random pages = 10240 candidate blocks
  GuestVm& victim = launch_victim_with_pages(rig.hv, rng, 20);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

  uint64_t oracle_before = rig.m.oracle_reads;
  LeakReport rep;
  std::vector<std::pair<Spa, V1Read>> reads;
  for (const auto& [gva, spfn] : victim.page_spfn) {
    if (gva == 0x400000) continue;
    for (uint64_t off = 0; off < kPageSize; off += 8) {
      Spa spa = (spfn << kPfnShift) + off;
      reads.emplace_back(spa, v1_read_block(rig.hv, victim, attacker, spa, &rep));
    }
  }
  REQUIRE(reads.size() == 10240);
  CHECK(rig.m.oracle_reads == oracle_before);

  size_t mismatches = 0;
  for (const auto& [spa, r] : reads) {
    uint64_t gt = rig.m.oracle_read8(spa, victim.asid);
    bool expect = pte_is_leakable(gt, false);
    bool ok = (r.outcome == V1Outcome::Leaked) == expect;
    if (expect) ok = ok && r.pfn == (Pte{gt}.pfn() & ~kPfnCbitMask);
    if (!ok) ++mismatches;
  }
  CHECK(mismatches == 0);
  CHECK(rep.attempts == 10240);
  CHECK(rep.npf_count + rep.triple_fault_count == rep.attempts);
}

TEST_CASE("an implausible block crashes the probe and is recorded, not retried") {
  Rig rig(1002);
  SplitMix64 rng(1002);
  VmLaunchConfig vc;
  vc.sev_class = SevClass::Sev;
  vc.mappings.push_back({0x400000, fixtures::mov_then_cpuid_page(), true, false});
  vc.mappings.push_back({0x500000, std::vector<uint8_t>(kPageSize, 0), true, false});
  vc.entry_rip = 0x400000;
  vc.idtr_base = 0x400000;
  GuestVm& victim = rig.hv.launch_vm(vc);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

  Spa spa = victim.page_spfn.at(0x500000) << kPfnShift;
  LeakReport rep;
  V1Read r = v1_read_block(rig.hv, victim, attacker, spa, &rep);
  CHECK(r.outcome == V1Outcome::Unleakable);
  CHECK(rep.triple_fault_count == 1);
  CHECK(rep.leaked_bytes() == 0);
  CHECK_FALSE(rep.recovered.at(spa).has_value());

  // with rewinding disabled the crash forces a relaunch instead
  bool relaunch = false;
  try {
    v1_read_block(rig.hv, victim, attacker, spa, &rep, false);
  } catch (const Error& e) {
    relaunch = e.kind == Err::VmRelaunchNeeded;
  }
  CHECK(relaunch);
  CHECK(rep.vm_relaunch_count == 1);
}

TEST_CASE("misaligned probe addresses are rejected") {
  Rig rig(1003);
  SplitMix64 rng(1003);
  GuestVm& victim = launch_victim_with_pages(rig.hv, rng, 1);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);
  CHECK_THROWS_AS(v1_read_block(rig.hv, victim, attacker, 0x5004), Error);
}

TEST_CASE("table reconstruction matches ground truth at 10 and 1000 pages") {
  for (size_t pages : {size_t{10}, size_t{1000}}) {
    Rig rig(2000 + pages);
    SplitMix64 rng(2000 + pages);
    GuestVm& victim = launch_victim_with_pages(rig.hv, rng, pages);
    GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

    LeakReport rep;
    GptDump dump = v1_dump_page_table(rig.hv, victim, attacker, &rep);
    GptDump expect = scn::gpt_from_ground_truth(victim);
    CHECK(dump.root_gpfn == expect.root_gpfn);
    CHECK(dump.tables == expect.tables);
    CHECK(rep.vm_relaunch_count == 0);
  }
}

TEST_CASE("page decryption and injection are byte-exact over 100 pages each") {
  Rig rig(3000);
  SplitMix64 rng(3000);
  const Gva base = 0x400000, data = 0x600000;
  const size_t pages = 100;

  VmLaunchConfig vc;
  vc.sev_class = SevClass::Sev;
  vc.mappings.push_back({base, fixtures::victim_binary(), true, false});
  std::vector<std::vector<uint8_t>> plain;
  for (size_t i = 0; i < pages; ++i) {
    plain.push_back(fixtures::random_page(rng));
    vc.mappings.push_back({data + i * kPageSize, plain.back(), true, false});
  }
  vc.entry_rip = base;
  vc.idtr_base = base;
  GuestVm& victim = rig.hv.launch_vm(vc);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

  uint64_t oracle_before = rig.m.oracle_reads;
  GptDump gpt = v1_dump_page_table(rig.hv, victim, attacker);

  // register-write smoke check first
  MomentaryParams smoke;
  smoke.rip = base + fixtures::kR15SmokeOffset;
  smoke.gcr3 = (gpt.root_gpfn << kPfnShift) | kCbitMask;
  VmExit se;
  SaveState st = v2_momentary_exec(rig.hv, victim, attacker, gpt, smoke, &se);
  CHECK(static_cast<uint32_t>(st.regs[15]) == 2020);
  CHECK(se.retired == 1);

  Gadget load{base + fixtures::kLoadGadgetOffset, 3, 0, false};
  Gadget store{base + fixtures::kStoreGadgetOffset, 12, 0, true};

  size_t decrypt_exact = 0;
  for (size_t i = 0; i < pages; ++i) {
    Spa target = victim.page_spfn.at(data + i * kPageSize) << kPfnShift;
    auto got = v2_decrypt_page(rig.hv, victim, attacker, gpt, load, data, target);
    if (std::equal(got.begin(), got.end(), plain[i].begin())) ++decrypt_exact;
  }
  CHECK(decrypt_exact == pages);

  std::vector<std::vector<uint8_t>> injected;
  for (size_t i = 0; i < pages; ++i) {
    injected.push_back(fixtures::random_page(rng));
    Spa target = victim.page_spfn.at(data + i * kPageSize) << kPfnShift;
    v2_encrypt_page(rig.hv, victim, attacker, gpt, store, data, target, injected[i].data());
  }
  CHECK(rig.m.oracle_reads == oracle_before);

  size_t encrypt_exact = 0;
  for (size_t i = 0; i < pages; ++i) {
    std::array<uint8_t, kPageSize> gt{};
    rig.m.oracle_read_page(victim.page_spfn.at(data + i * kPageSize) << kPfnShift, victim.asid,
                           gt.data());
    if (std::equal(gt.begin(), gt.end(), injected[i].begin())) ++encrypt_exact;
  }
  CHECK(encrypt_exact == pages);
}

TEST_CASE("momentary execution refuses encrypted-state guests") {
  Rig rig(3001);
  SplitMix64 rng(3001);
  GuestVm& victim = launch_victim_with_pages(rig.hv, rng, 1, SevClass::SevEs);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::SevEs);
  GptDump gpt = scn::gpt_from_ground_truth(victim);
  MomentaryParams p;
  p.rip = 0x400000;
  p.gcr3 = victim.ground_truth.gcr3;
  bool refused = false;
  try {
    v2_momentary_exec(rig.hv, victim, attacker, gpt, p);
  } catch (const Error& e) {
    refused = e.kind == Err::SevEsUnsupported;
  }
  CHECK(refused);
}

TEST_CASE("gadget location recovers planted addresses and validates them") {
  auto binary = fixtures::victim_binary();
  SplitMix64 rng(4000);
  for (int trial = 0; trial < 3; ++trial) {
    Rig rig(4000 + trial);
    Gva image_base = gva_from_indices(0, 0, 3, 16 + rng.below(200));
    VmLaunchConfig vc;
    vc.sev_class = SevClass::Sev;
    vc.mappings.push_back({image_base, binary, true, false});
    vc.entry_rip = image_base;
    vc.idtr_base = image_base;
    GuestVm& victim = rig.hv.launch_vm(vc);
    GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

    LocatedGadgets lg = locate_gadgets(rig.hv, victim, attacker, binary, true);
    CHECK(lg.image_base == image_base);
    CHECK(lg.load.gva == image_base + fixtures::kLoadGadgetOffset);
    CHECK(lg.store.gva == image_base + fixtures::kStoreGadgetOffset);
  }

  // without the serving-process event the search never starts
  Rig rig(4010);
  SplitMix64 rng2(4010);
  GuestVm& victim = launch_victim_with_pages(rig.hv, rng2, 1);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);
  CHECK_THROWS_AS(locate_gadgets(rig.hv, victim, attacker, binary, false), Error);
  // and a gadget-free image reports the absence
  std::vector<uint8_t> bare(0x4000, 0);
  bool not_found = false;
  try {
    locate_gadgets(rig.hv, victim, attacker, bare, true);
  } catch (const Error& e) {
    not_found = e.kind == Err::GadgetNotFound;
  }
  CHECK(not_found);
}

TEST_CASE("paused-guest reads leak at the offset its own resume address dictates") {
  Rig rig(5000);
  SplitMix64 rng(5000);
  auto pte_page = fixtures::valid_pte_page(rng);
  VmLaunchConfig vc;
  vc.sev_class = SevClass::SevEs;
  vc.mappings.push_back({0x400000, fixtures::mov_then_cpuid_page(), true, false});
  vc.mappings.push_back({0x500000, pte_page, true, false});
  vc.entry_rip = 0x400000;
  vc.idtr_base = 0x400000;
  GuestVm& victim = rig.hv.launch_vm(vc);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::SevEs);

  rig.hv.run(victim, 1);  // pause mid-workload
  SaveState paused = rig.hv.read_vmsa(victim);

  SevesRead r = seves_v1_read(rig.hv, victim, attacker, victim.page_spfn.at(0x500000));
  CHECK(r.leaked);
  CHECK(r.victim_gcr3 == page_of(strip_cbit(victim.ground_truth.gcr3)));
  CHECK(r.offset == walk_index(paused.rip, 1) * 8);
  uint64_t gt = rig.m.oracle_read8((victim.page_spfn.at(0x500000) << kPfnShift) + r.offset,
                                   victim.asid);
  CHECK(r.pfn == (Pte{gt}.pfn() & ~kPfnCbitMask));

  // the victim's encrypted state is untouched beyond the fault address
  SaveState after = rig.hv.read_vmsa(victim);
  SaveState masked = after;
  masked.cr2 = paused.cr2;
  CHECK(masked == paused);
}

TEST_CASE("chained faults after a present sweep expose all four index fields") {
  Rig rig(5001);
  Gva base = gva_from_indices(3, 7, 11, 13);
  VmLaunchConfig vc;
  vc.sev_class = SevClass::SevEs;
  vc.mappings.push_back({base, fixtures::mov_then_cpuid_page(), true, false});
  vc.entry_rip = base;
  vc.idtr_base = base;
  GuestVm& vm = rig.hv.launch_vm(vc);

  auto offs = capture_rip_offsets(rig.hv, vm);
  REQUIRE(offs.size() == 4);
  CHECK(offs[0] == 3 * 8);
  CHECK(offs[1] == 7 * 8);
  CHECK(offs[2] == 11 * 8);
  CHECK(offs[3] == 13 * 8);
  // and the guest is healed afterward
  VmExit e = rig.hv.run(vm, 64);
  CHECK(e.code == ExitCode::Cpuid);
}

TEST_CASE("coverage mean over round subsets matches brute-force enumeration") {
  OffsetCoverage cov;
  cov.rounds = {{0, 8, 16}, {8, 24}, {0, 24, 32, 40}, {16}};
  int n = 4;
  for (int N = 1; N <= n; ++N) {
    // enumerate all C(4,N) subsets directly
    double total = 0;
    int count = 0;
    for (int mask = 0; mask < (1 << n); ++mask) {
      if (__builtin_popcount(mask) != N) continue;
      std::set<uint64_t> u;
      for (int i = 0; i < n; ++i)
        if (mask & (1 << i)) u.insert(cov.rounds[i].begin(), cov.rounds[i].end());
      total += double(u.size());
      ++count;
    }
    CHECK(cov.mean_coverage(N) == doctest::Approx(total / count).epsilon(1e-9));
  }
  CHECK(cov.mean_coverage(0) == 0.0);
  CHECK(cov.mean_coverage(5) == 0.0);
  auto cum = cov.cumulative();
  for (size_t i = 1; i < cum.size(); ++i) CHECK(cum[i] >= cum[i - 1]);
}

TEST_CASE("uniform resume addresses cover offsets at the analytic rate") {
  Rig rig(6000);
  SplitMix64 rng(6000);
  VmLaunchConfig vc;
  vc.sev_class = SevClass::SevEs;
  vc.mappings.push_back({0x400000, fixtures::mov_then_cpuid_page(), true, false});
  vc.entry_rip = 0x400000;
  vc.idtr_base = 0x400000;
  GuestVm& vm = rig.hv.launch_vm(vc);

  const int reps = 40;
  for (uint64_t k : {64ULL, 256ULL, 1024ULL}) {
    double sum = 0;
    for (int r = 0; r < reps; ++r) sum += double(uniform_rip_offsets(rig.hv, vm, k, rng).size());
    double meas = sum / reps;
    double expect = 512.0 * (1.0 - std::pow(1.0 - 1.0 / 512.0, double(k)));
    CHECK(std::abs(meas - expect) <= 0.03 * expect);
  }
}

TEST_CASE("stale translations carry a foreign guest's code one page, then crash") {
  Rig rig(7000);
  VmLaunchConfig vc;
  vc.sev_class = SevClass::Sev;
  vc.mappings.push_back({0x400000, fixtures::probe_loop_page(), true, false});
  vc.entry_rip = 0x400000;
  vc.idtr_base = 0x400000;
  GuestVm& victim = rig.hv.launch_vm(vc);

  VmLaunchConfig ac;
  ac.sev_class = SevClass::None;
  ac.mappings.push_back({0x200000, std::vector<uint8_t>(kPageSize, 0), false, false});
  ac.entry_rip = 0x200000;
  ac.idtr_base = 0x200000;
  GuestVm& attacker = rig.hv.launch_vm(ac);

  // prime: the victim executes its loop so its code translation is cached
  for (int i = 0; i < 4; ++i) {
    VmExit e = rig.hv.run(victim, 16);
    rig.hv.handle_exit(victim, e);
    if (e.code == ExitCode::Cpuid) break;
  }

  V3Result res = v3_tlb_reuse(rig.hv, victim, attacker, 0x400000, false);
  CHECK(res.cpuid_seen);
  CHECK(res.r11d == 0x7e4);
  CHECK(res.r12d == 0x7e4);
  CHECK(res.npf_count == 0);
  CHECK(res.shutdown);

  // control: a flushed translation cache gives the attacker nothing
  for (int i = 0; i < 4; ++i) {
    VmExit e = rig.hv.run(victim, 16);
    rig.hv.handle_exit(victim, e);
    if (e.code == ExitCode::Cpuid) break;
  }
  V3Result ctrl = v3_tlb_reuse(rig.hv, victim, attacker, 0x400000, true);
  CHECK_FALSE(ctrl.cpuid_seen);
  CHECK(ctrl.r11d == 0);
  CHECK(ctrl.r12d == 0);
}

TEST_CASE("ownership-checked mode blocks every probe with zero bytes leaked") {
  Rig rig(8000, true);
  SplitMix64 rng(8000);
  GuestVm& victim = launch_victim_with_pages(rig.hv, rng, 4);
  GuestVm& attacker = scn::launch_attacker(rig.hv, SevClass::Sev);

  LeakReport rep;
  for (const auto& [gva, spfn] : victim.page_spfn) {
    V1Read r = v1_read_block(rig.hv, victim, attacker, spfn << kPfnShift, &rep);
    CHECK(r.outcome == V1Outcome::Blocked);
  }
  CHECK(rep.leaked_bytes() == 0);
  CHECK(rep.rmp_fault_count == rep.attempts);

  GptDump dump = v1_dump_page_table(rig.hv, victim, attacker, &rep);
  CHECK(dump.blocked);
  CHECK(rep.leaked_bytes() == 0);
}

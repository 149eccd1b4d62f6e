#pragma once

// Platform management the attacks subvert: ASID pools, VM lifecycle, exit
// dispatch, nPT ownership, and the privileged VMCB/nPT mutation knobs.

#include <map>
#include <memory>
#include <set>
#include <vector>

#include "sevsim/machine.hpp"
#include "sevsim/vm_core.hpp"

namespace sevsim {

enum class SevClass { None, Sev, SevEs };

struct AsidPools {
  uint32_t max_all = 32768;
  uint32_t max_sev = 15;
  uint32_t min_sev_non_es = 5;  // ASIDs [1, min) are SEV-ES

  bool in_class_range(SevClass c, Asid a) const {
    switch (c) {
      case SevClass::SevEs: return a >= 1 && a < min_sev_non_es;
      case SevClass::Sev: return a >= min_sev_non_es && a <= max_sev;
      case SevClass::None: return a >= 1 && a <= max_all;
    }
    return false;
  }
};

struct GuestMapping {
  Gva gva = 0;
  std::vector<uint8_t> data;  // page-multiple
  bool gc = true;             // leaf C-bit
  bool g = false;             // leaf Global bit
};

struct VmLaunchConfig {
  SevClass sev_class = SevClass::Sev;
  std::vector<GuestMapping> mappings;
  Gva entry_rip = 0;
  Gva idtr_base = 0;
  uint64_t rflags = kRflagsIf;
};

struct GuestVm {
  uint32_t vm_id = 0;
  SevClass sev_class = SevClass::None;
  Asid asid = 0;
  Vmcb vmcb;
  NestedPageTable npt;
  Spa vmsa_spa = 0;  // SEV-ES only
  bool crashed = false;

  // hypervisor-legitimate knowledge: it built and owns the nPT
  std::map<uint64_t, uint64_t> gpa_to_spa;  // gpfn -> spfn
  std::map<Gva, uint64_t> page_spfn;        // where the image pages were placed
  bool destroyed = false;

  // test oracle only; never feeds attack-path computation
  struct GroundTruth {
    Gpa gcr3 = 0;
    std::map<uint64_t, std::array<uint64_t, 512>> tables;  // table gpfn -> entries
    std::map<Gva, std::vector<uint8_t>> mappings;          // page gva -> plaintext
  } ground_truth;

  bool is_sev() const { return sev_class != SevClass::None; }
};

class Hypervisor {
 public:
  explicit Hypervisor(Machine& m) : machine_(m) {
    pools_.max_all = m.config.max_all_asid;
    pools_.max_sev = m.config.max_sev_asid;
    pools_.min_sev_non_es = m.config.min_sev_non_es;
  }

  Machine& machine() { return machine_; }
  const AsidPools& pools() const { return pools_; }

  GuestVm& launch_vm(const VmLaunchConfig& cfg) {
    auto vm = std::make_unique<GuestVm>();
    vm->vm_id = next_vm_id_++;
    vm->sev_class = cfg.sev_class;
    vm->asid = allocate_asid(cfg.sev_class);
    if (vm->is_sev()) machine_.engine.activate(vm->asid);

    build_address_space(*vm, cfg);

    Vmcb& v = vm->vmcb;
    v.asid = vm->asid;
    if (cfg.sev_class == SevClass::Sev) v.sev_bits = kSevBit;
    if (cfg.sev_class == SevClass::SevEs) v.sev_bits = kSevBit | kSevEsBit;
    v.ncr3 = static_cast<Spa>(vm->vm_id) << 32;  // symbolic; the nPT object is authoritative
    v.save.rip = cfg.entry_rip;
    v.save.gcr3 = vm->ground_truth.gcr3;
    v.save.idtr_base = cfg.idtr_base;
    v.save.rflags = cfg.rflags;

    if (cfg.sev_class == SevClass::SevEs) {
      vm->vmsa_spa = (alloc_spa_frame() << kPfnShift);
      write_vmsa(*vm, v.save);
      v.vmsa_ptr = vm->vmsa_spa;
      if (machine_.config.snp_mode)
        machine_.rmp.validate(vm->vmsa_spa, vm->asid, vm->vmsa_spa);
    }

    trace("launch_vm", *vm, "asid", 0, vm->asid);
    vms_.push_back(std::move(vm));
    return *vms_.back();
  }

  VmExit run(GuestVm& vm, uint64_t step_budget = 64) {
    return vmrun(machine_, vm.vmcb, vm.npt, step_budget);
  }

  // Default policies: benign NPFs are mapped and retried, CPUID is emulated,
  // SHUTDOWN marks the VM crashed.
  void handle_exit(GuestVm& vm, const VmExit& exit) {
    switch (exit.code) {
      case ExitCode::Npf: {
        uint64_t gpfn = pfn_of(exit.exitinfo2);
        auto it = vm.gpa_to_spa.find(gpfn);
        if (it != vm.gpa_to_spa.end())
          vm.npt.map(gpfn << kPfnShift, it->second << kPfnShift);
        break;
      }
      case ExitCode::Cpuid:
        if (vm.sev_class == SevClass::SevEs) {
          es_advance_rip(vm, 2);  // models the guest #VC handler outcome
        } else {
          vm.vmcb.save.regs[0] = 0x00830F12;  // synthetic leaf data
          vm.vmcb.save.rip += 2;
        }
        break;
      case ExitCode::Shutdown:
        vm.crashed = true;
        break;
      default:
        break;
    }
    if (machine_.trace)
      machine_.trace->emit("DISPATCH",
                           {{"vm", vm.vm_id}, {"code", hex(vm.vmcb.exitcode)}});
  }

  // ---- privileged knobs (no hardware checks: that is the vulnerability) ----

  void clear_present_bits(GuestVm& vm) {
    vm.npt.clear_present_bits();
    trace("clear_present_bits", vm, "npt", 1, 0);
  }

  void restore_present_bits(GuestVm& vm) {
    vm.npt.restore_present_bits();
    trace("restore_present_bits", vm, "npt", 0, 1);
  }

  void remap_gpa(GuestVm& vm, Gpa gpa, uint64_t target_spfn) {
    vm.npt.map(gpa, target_spfn << kPfnShift);
    trace("remap_gpa", vm, "npt", pfn_of(gpa), target_spfn);
  }

  void remap_gcr3(GuestVm& vm, uint64_t target_spfn) {
    remap_gpa(vm, page_of(strip_cbit(vm.vmcb.save.gcr3)), target_spfn);
  }

  void set_asid(GuestVm& vm, Asid asid) {
    trace("set_asid", vm, "vmcb.asid", vm.vmcb.asid, asid);
    vm.vmcb.asid = asid;
    vm.vmcb.clean_bits |= 1u << 2;  // ASID reload
  }

  void set_sev_bit(GuestVm& vm, SevClass cls) {
    uint64_t bits = 0;
    if (cls == SevClass::Sev) bits = kSevBit;
    if (cls == SevClass::SevEs) bits = kSevBit | kSevEsBit;
    trace("set_sev_bit", vm, "vmcb.sev_bits", vm.vmcb.sev_bits, bits);
    vm.vmcb.sev_bits = bits;  // range validation deferred to vmrun
  }

  void set_vmsa_ptr(GuestVm& vm, Spa vmsa) {
    trace("set_vmsa_ptr", vm, "vmcb.vmsa_ptr", vm.vmcb.vmsa_ptr, vmsa);
    vm.vmcb.vmsa_ptr = vmsa;
  }

  // First NPF after clearing present bits reveals the running process's gCR3.
  Gpa capture_gcr3(GuestVm& vm, uint64_t step_budget = 64) {
    if (vm.crashed) throw Error(Err::VmCrashed);
    clear_present_bits(vm);
    vm.vmcb.tlb_control = 1;
    VmExit exit = run(vm, step_budget);
    restore_present_bits(vm);
    if (exit.code != ExitCode::Npf) throw Error(Err::VmCrashed, "no NPF before crash");
    return page_of(exit.exitinfo2);
  }

  // guest-legitimate VMSA edit under the VM's own key (models guest-side
  // emulation paths); refreshes the integrity digest
  void es_advance_rip(GuestVm& vm, int delta) {
    SaveState st = read_vmsa(vm);
    st.rip += delta;
    write_vmsa(vm, st);
  }

  SaveState read_vmsa(const GuestVm& vm) {
    std::array<uint8_t, kVmsaImageSize> plain{};
    for (size_t off = 0; off < kVmsaImageSize; off += 16) {
      U128 c = machine_.dram.read_raw_block(vm.vmsa_spa + off);
      U128 p = machine_.engine.decrypt_block(vm.asid, vm.vmsa_spa + off, c);
      std::memcpy(plain.data() + off, &p.lo, 8);
      std::memcpy(plain.data() + off + 8, &p.hi, 8);
    }
    return deserialize_save_state(plain.data());
  }

  void write_vmsa(GuestVm& vm, const SaveState& st) {
    auto bytes = serialize_save_state(st);
    for (size_t off = 0; off < kVmsaImageSize; off += 16) {
      U128 blk;
      std::memcpy(&blk.lo, bytes.data() + off, 8);
      std::memcpy(&blk.hi, bytes.data() + off + 8, 8);
      machine_.dram.write_raw_block(vm.vmsa_spa + off,
                                    machine_.engine.encrypt_block(vm.asid, vm.vmsa_spa + off, blk));
    }
    machine_.protected_dram.digests[vm.vmsa_spa] = vmsa_digest(st);
  }

  // DEACTIVATE plus the flush protocol so the ASID can be reused
  void destroy_vm(GuestVm& vm) {
    if (vm.destroyed) return;
    if (vm.is_sev()) {
      machine_.engine.deactivate(vm.asid);
      machine_.wbinvd();
      machine_.df_flush();
    }
    machine_.tlb.flush_asid(vm.asid);
    allocated_.erase(vm.asid);
    vm.destroyed = true;
    trace("destroy_vm", vm, "asid", vm.asid, 0);
  }

  uint64_t alloc_spa_frame() { return next_spa_frame_++; }

  std::vector<std::unique_ptr<GuestVm>>& vms() { return vms_; }

 private:
  Asid allocate_asid(SevClass cls) {
    uint32_t lo = 1, hi = pools_.max_all;
    if (cls == SevClass::SevEs) {
      hi = pools_.min_sev_non_es - 1;
    } else if (cls == SevClass::Sev) {
      lo = pools_.min_sev_non_es;
      hi = pools_.max_sev;
    } else {
      lo = pools_.max_sev + 1;  // keep non-SEV clear of the SEV pool
    }
    for (uint32_t a = lo; a <= hi; ++a) {
      if (!allocated_.count(a)) {
        allocated_.insert(a);
        return a;
      }
    }
    throw Error(Err::PoolExhausted);
  }

  void build_address_space(GuestVm& vm, const VmLaunchConfig& cfg) {
    // guest-physical frame allocator; table pages first, gCR3 at the root
    uint64_t next_gpfn = 0x100 + uint64_t(vm.vm_id) * 0x10000;
    auto alloc_table = [&]() -> uint64_t {
      uint64_t gpfn = next_gpfn++;
      vm.ground_truth.tables[gpfn] = {};
      return gpfn;
    };

    uint64_t root = alloc_table();
    vm.ground_truth.gcr3 = (root << kPfnShift) | (vm.is_sev() ? kCbitMask : 0);

    std::map<Gva, uint64_t> page_gpfn;  // leaf data pages
    for (const auto& m : cfg.mappings) {
      if (m.data.size() % kPageSize) throw Error(Err::ConfigParseError, "mapping not page-sized");
      for (size_t p = 0; p * kPageSize < m.data.size(); ++p) {
        Gva gva = m.gva + p * kPageSize;
        if (!is_canonical(gva)) throw Error(Err::NonCanonicalAddress);
        uint64_t table = root;
        for (int level = 1; level <= 3; ++level) {
          uint64_t idx = walk_index(gva, level);
          auto& entries = vm.ground_truth.tables[table];
          uint64_t child;
          if (entries[idx] & 1) {
            child = Pte{entries[idx]}.pfn() & ~kPfnCbitMask;
          } else {
            child = alloc_table();
            entries[idx] = Pte::make(child, true, vm.is_sev()).raw;
          }
          table = child;
        }
        uint64_t gpfn = next_gpfn++;
        page_gpfn[gva] = gpfn;
        vm.ground_truth.tables[table][walk_index(gva, 4)] =
            Pte::make(gpfn, true, m.gc, false, m.g).raw;
        std::vector<uint8_t> page(m.data.begin() + p * kPageSize,
                                  m.data.begin() + (p + 1) * kPageSize);
        vm.ground_truth.mappings[gva] = page;
      }
    }

    // materialize: every guest frame gets a system frame; tables and code
    // are forced private, data pages follow their gC bit
    auto install = [&](uint64_t gpfn, const uint8_t* plain, bool encrypted) {
      uint64_t spfn = alloc_spa_frame();
      vm.gpa_to_spa[gpfn] = spfn;
      vm.npt.map(gpfn << kPfnShift, spfn << kPfnShift);
      if (encrypted && vm.is_sev())
        machine_.install_encrypted_page(spfn << kPfnShift, vm.asid, plain);
      else
        machine_.install_plain_page(spfn << kPfnShift, plain);
      if (machine_.config.snp_mode)
        machine_.rmp.validate(spfn << kPfnShift, vm.asid, gpfn << kPfnShift);
    };

    for (auto& [gpfn, entries] : vm.ground_truth.tables)
      install(gpfn, reinterpret_cast<const uint8_t*>(entries.data()), true);
    for (const auto& m : cfg.mappings) {
      for (size_t p = 0; p * kPageSize < m.data.size(); ++p) {
        Gva gva = m.gva + p * kPageSize;
        install(page_gpfn[gva], vm.ground_truth.mappings[gva].data(), m.gc);
        vm.page_spfn[gva] = vm.gpa_to_spa.at(page_gpfn[gva]);
      }
    }
  }

  void trace(const char* op, const GuestVm& vm, const char* field, uint64_t oldv, uint64_t newv) {
    if (machine_.trace)
      machine_.trace->emit("HV_OP", {{"op", op},
                                     {"vm", vm.vm_id},
                                     {"field", field},
                                     {"old", hex(oldv)},
                                     {"new", hex(newv)}});
  }

  Machine& machine_;
  AsidPools pools_;
  std::vector<std::unique_ptr<GuestVm>> vms_;
  std::set<Asid> allocated_;
  uint32_t next_vm_id_ = 1;
  uint64_t next_spa_frame_ = 0x2000;
};

}  // namespace sevsim

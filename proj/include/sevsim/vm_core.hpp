#pragma once

// vCPU execution: VMCB/VMSA layout, VMRUN/VMEXIT semantics, the mini
// instruction set needed for momentary execution, and fault escalation.

#include <array>
#include <cstring>
#include <optional>
#include <vector>

#include "sevsim/machine.hpp"
#include "sevsim/types.hpp"

namespace sevsim {

inline constexpr uint64_t kRflagsIf = 1ULL << 9;
inline constexpr uint64_t kVIrq = 1ULL << 8;  // bit 8 of virt_int_ctl
inline constexpr uint64_t kSevBit = 1ULL << 1;   // offset 090h bit 1
inline constexpr uint64_t kSevEsBit = 1ULL << 2;  // offset 090h bit 2

enum class ExitCode : uint64_t {
  Npf = 0x400,
  RmpFault = 0x401,
  Shutdown = 0x7F,  // triple fault
  Cpuid = 0x72,
  VmrunIntegrityError = 0xFFFFFFFFULL,
  StepBudget = 0x1001,
};

struct VmExit {
  ExitCode code = ExitCode::StepBudget;
  uint64_t exitinfo2 = 0;  // faulting gPA for NPF/RMP
  uint64_t exitintinfo = 0;
  uint64_t retired = 0;  // architecturally completed guest instructions
};

// Register file indices follow x86-64 encoding (0=rax .. 15=r15).
struct SaveState {
  Gva rip = 0;
  uint64_t rflags = 0;
  Gpa gcr3 = 0;
  Gva idtr_base = 0;
  uint64_t cr2 = 0;
  std::array<uint64_t, 16> regs{};

  friend bool operator==(const SaveState&, const SaveState&) = default;
};

inline constexpr size_t kVmsaSerializedSize = 21 * 8;
inline constexpr size_t kVmsaImageSize = 176;  // padded to 16-byte blocks

inline std::array<uint8_t, kVmsaImageSize> serialize_save_state(const SaveState& st) {
  std::array<uint8_t, kVmsaImageSize> out{};
  uint64_t fields[21] = {st.rip, st.rflags, st.gcr3, st.idtr_base, st.cr2};
  for (int i = 0; i < 16; ++i) fields[5 + i] = st.regs[i];
  std::memcpy(out.data(), fields, sizeof(fields));
  return out;
}

inline SaveState deserialize_save_state(const uint8_t* bytes) {
  uint64_t fields[21];
  std::memcpy(fields, bytes, sizeof(fields));
  SaveState st;
  st.rip = fields[0];
  st.rflags = fields[1];
  st.gcr3 = fields[2];
  st.idtr_base = fields[3];
  st.cr2 = fields[4];
  for (int i = 0; i < 16; ++i) st.regs[i] = fields[5 + i];
  return st;
}

inline uint64_t vmsa_digest(const SaveState& st) {
  auto bytes = serialize_save_state(st);
  return fnv1a64(bytes.data(), bytes.size());
}

struct Vmcb {
  // control area (always hypervisor-visible)
  Asid asid = 0;                 // 058h
  uint8_t tlb_control = 0;       // 05Ch
  uint64_t virt_int_ctl = 0;     // 060h, V_IRQ at bit 8
  uint64_t exitcode = 0;         // 070h
  uint64_t exitinfo1 = 0;        // 078h
  uint64_t exitinfo2 = 0;        // 080h
  uint64_t exitintinfo = 0;      // 088h
  uint64_t sev_bits = 0;         // 090h: bit1 SEV, bit2 SEV-ES
  Gpa ghcb_gpa = 0;              // 0A0h
  Spa ncr3 = 0;                  // 0B0h
  uint32_t clean_bits = 0;       // 0C0h
  Gva nrip = 0;                  // 0C8h
  Spa vmsa_ptr = 0;              // 108h

  // cleartext save state (plain SEV / non-SEV); SEV-ES state lives in the VMSA
  SaveState save;

  bool is_sev() const { return sev_bits & kSevBit; }
  bool is_sev_es() const { return sev_bits & kSevEsBit; }
};

// byte-faithful rewind support
inline Vmcb vmcb_snapshot(const Vmcb& v) { return v; }
inline void vmcb_restore(Vmcb& v, const Vmcb& snap) { v = snap; }

inline constexpr size_t kVmcbDumpSize = 0x400 + kVmsaSerializedSize;

// Flat binary with control fields at the documented offsets; save state
// appended at 0x400. The bit-exact contract for golden-file tests.
inline std::vector<uint8_t> vmcb_dump(const Vmcb& v) {
  std::vector<uint8_t> out(kVmcbDumpSize, 0);
  auto put32 = [&](size_t off, uint32_t x) { std::memcpy(out.data() + off, &x, 4); };
  auto put64 = [&](size_t off, uint64_t x) { std::memcpy(out.data() + off, &x, 8); };
  put32(0x058, v.asid);
  out[0x05C] = v.tlb_control;
  put64(0x060, v.virt_int_ctl);
  put64(0x070, v.exitcode);
  put64(0x078, v.exitinfo1);
  put64(0x080, v.exitinfo2);
  put64(0x088, v.exitintinfo);
  put64(0x090, v.sev_bits);
  put64(0x0A0, v.ghcb_gpa);
  put64(0x0B0, v.ncr3);
  put32(0x0C0, v.clean_bits);
  put64(0x0C8, v.nrip);
  put64(0x108, v.vmsa_ptr);
  auto save = serialize_save_state(v.save);
  std::memcpy(out.data() + 0x400, save.data(), kVmsaSerializedSize);
  return out;
}

// ---- mini ISA ----

struct Decoded {
  enum Kind { MovImm32, MovLoad, MovStore, Cpuid, JmpRel8, Undefined } kind = Undefined;
  int len = 0;
  int reg = 0;       // destination (MovImm32/MovLoad) or source (MovStore)
  int addr_reg = 0;  // base register of the memory operand
  uint32_t imm = 0;
  int8_t rel = 0;
};

inline Decoded decode_instruction(const uint8_t* b, size_t n) {
  Decoded d;
  size_t i = 0;
  uint8_t rex = 0;
  if (i < n && (b[i] & 0xF0) == 0x40) rex = b[i++];
  if (i >= n) return d;
  uint8_t op = b[i];
  if (op >= 0xB8 && op <= 0xBF && !(rex & 8)) {  // REX.W form would be movabs
    if (i + 5 > n) return d;
    d.kind = Decoded::MovImm32;
    d.reg = (op - 0xB8) | ((rex & 1) << 3);
    std::memcpy(&d.imm, b + i + 1, 4);
    d.len = static_cast<int>(i) + 5;
    return d;
  }
  if ((op == 0x8B || op == 0x89) && (rex & 8)) {  // 64-bit mov reg<->mem
    if (i + 2 > n) return d;
    uint8_t modrm = b[i + 1];
    if ((modrm >> 6) != 0) return d;  // register-indirect only
    int reg = ((modrm >> 3) & 7) | ((rex & 4) ? 8 : 0);
    int rm = modrm & 7;
    int addr_reg;
    size_t len;
    if (rm == 4) {  // SIB
      if (i + 3 > n) return d;
      uint8_t sib = b[i + 2];
      if (((sib >> 3) & 7) != 4) return d;            // no index
      if ((sib & 7) == 5) return d;                   // disp32 form unsupported
      addr_reg = (sib & 7) | ((rex & 1) << 3);
      len = i + 3;
    } else if (rm == 5) {
      return d;  // rip-relative unsupported
    } else {
      addr_reg = rm | ((rex & 1) << 3);
      len = i + 2;
    }
    d.kind = (op == 0x8B) ? Decoded::MovLoad : Decoded::MovStore;
    d.reg = reg;
    d.addr_reg = addr_reg;
    d.len = static_cast<int>(len);
    return d;
  }
  if (op == 0x0F && !rex) {
    if (i + 2 > n) return d;
    if (b[i + 1] == 0xA2) {
      d.kind = Decoded::Cpuid;
      d.len = static_cast<int>(i) + 2;
    }
    return d;
  }
  if (op == 0xEB && !rex) {
    if (i + 2 > n) return d;
    d.kind = Decoded::JmpRel8;
    d.rel = static_cast<int8_t>(b[i + 1]);
    d.len = static_cast<int>(i) + 2;
    return d;
  }
  return d;
}

// ---- VMRUN ----

namespace detail {

struct TranslateOk {
  Spa spa;
  bool gc;
  bool nc;
};
using TranslateResult = std::variant<TranslateOk, GuestPageFault, NestedPageFault, RmpFault>;

inline TranslateResult translate(Machine& m, Asid asid, Gva gva, const WalkContext& ctx) {
  if (const TlbEntry* e = m.tlb.lookup(asid, gva))
    return TranslateOk{e->spa_page | (gva & kPageMask), e->gc, e->nc};
  WalkResult wr = m.guest_walk(gva, ctx);
  if (auto* ok = std::get_if<WalkSuccess>(&wr)) return TranslateOk{ok->spa, ok->gc, ok->nc};
  if (auto* pf = std::get_if<GuestPageFault>(&wr)) return *pf;
  if (auto* rf = std::get_if<RmpFault>(&wr)) return *rf;
  return std::get<NestedPageFault>(wr);
}

}  // namespace detail

inline void check_asid_range(const MachineConfig& cfg, const Vmcb& v) {
  Asid a = v.asid;
  if (a == 0) throw Error(Err::IllegalAsidRange, "ASID 0 is reserved for the host");
  if (v.is_sev_es()) {
    if (a >= cfg.min_sev_non_es) throw Error(Err::IllegalAsidRange, "SEV-ES ASID out of range");
  } else if (v.is_sev()) {
    if (a < cfg.min_sev_non_es || a > cfg.max_sev_asid)
      throw Error(Err::IllegalAsidRange, "SEV ASID out of range");
  } else {
    if (a > cfg.max_all_asid) throw Error(Err::IllegalAsidRange, "ASID above pool maximum");
  }
}

// Executes one momentary run of the vCPU described by `vmcb` over `npt`.
// Returns on intercept (CPUID), fault escalation, NPF/RMP fault, integrity
// failure, or step-budget exhaustion.
inline VmExit vmrun(Machine& m, Vmcb& vmcb, NestedPageTable& npt, uint64_t step_budget = 64) {
  check_asid_range(m.config, vmcb);

  const bool es = vmcb.is_sev_es();
  const bool sev = vmcb.is_sev();

  auto finish = [&](VmExit exit, SaveState& st, Gva rip) -> VmExit {
    st.rip = rip;
    vmcb.exitcode = static_cast<uint64_t>(exit.code);
    vmcb.exitinfo2 = exit.exitinfo2;
    vmcb.exitintinfo = exit.exitintinfo;
    if (es) {
      // re-encrypt the VMSA and refresh its digest; nRIP is always 0 on
      // SEV-ES exits
      auto bytes = serialize_save_state(st);
      for (size_t off = 0; off < kVmsaImageSize; off += 16) {
        U128 blk;
        std::memcpy(&blk.lo, bytes.data() + off, 8);
        std::memcpy(&blk.hi, bytes.data() + off + 8, 8);
        m.dram.write_raw_block(vmcb.vmsa_ptr + off,
                               m.engine.encrypt_block(vmcb.asid, vmcb.vmsa_ptr + off, blk));
      }
      m.protected_dram.digests[vmcb.vmsa_ptr] = vmsa_digest(st);
      vmcb.nrip = 0;
    } else {
      vmcb.save = st;
      vmcb.nrip = rip;
    }
    if (m.trace) {
      m.trace->emit("VMEXIT", {{"asid", vmcb.asid},
                               {"code", hex(vmcb.exitcode)},
                               {"exitinfo2", hex(vmcb.exitinfo2)},
                               {"retired", exit.retired}});
    }
    return exit;
  };

  SaveState st;
  if (es) {
    // (a) VMSA load + integrity check before any guest step
    if (m.config.snp_mode) {
      auto it = m.rmp.entries.find(pfn_of(vmcb.vmsa_ptr));
      if (it != m.rmp.entries.end() && it->second.asid != vmcb.asid)
        return VmExit{ExitCode::VmrunIntegrityError, 0, 0, 0};
    }
    std::array<uint8_t, kVmsaImageSize> plain{};
    for (size_t off = 0; off < kVmsaImageSize; off += 16) {
      U128 c = m.dram.read_raw_block(vmcb.vmsa_ptr + off);
      U128 p = m.engine.decrypt_block(vmcb.asid, vmcb.vmsa_ptr + off, c);
      std::memcpy(plain.data() + off, &p.lo, 8);
      std::memcpy(plain.data() + off + 8, &p.hi, 8);
    }
    auto digest_it = m.protected_dram.digests.find(vmcb.vmsa_ptr);
    if (digest_it == m.protected_dram.digests.end() ||
        digest_it->second != fnv1a64(plain.data(), plain.size())) {
      vmcb.exitcode = static_cast<uint64_t>(ExitCode::VmrunIntegrityError);
      if (m.trace)
        m.trace->emit("VMEXIT", {{"asid", vmcb.asid}, {"code", hex(vmcb.exitcode)}});
      return VmExit{ExitCode::VmrunIntegrityError, 0, 0, 0};
    }
    st = deserialize_save_state(plain.data());
  } else {
    st = vmcb.save;
  }

  // (b) TLB flush request; clean bits are recorded but state is always
  // reloaded from the VMCB in this model
  if (vmcb.tlb_control) {
    m.tlb.flush_all();
    vmcb.tlb_control = 0;
  }

  if (m.trace) {
    m.trace->emit("VMRUN", {{"asid", vmcb.asid},
                            {"sev_bits", vmcb.sev_bits},
                            {"rip", hex(st.rip)}});
  }

  // (c) resume point
  Gva rip = st.rip;
  if ((vmcb.virt_int_ctl & kVIrq) && (st.rflags & kRflagsIf)) rip = st.idtr_base;

  WalkContext wctx{st.gcr3, &npt, vmcb.asid, sev};
  VmExit exit;
  uint64_t retired = 0;

  // Fault delivery: CR2 is written when the fault is raised; RIP only moves
  // once the handler fetch succeeds. Three delivery failures escalate to a
  // triple-fault SHUTDOWN.
  int delivery_failures = 0;
  bool delivering = false;

  auto raise_guest_fault = [&](std::optional<Gva> fault_addr) -> std::optional<VmExit> {
    if (fault_addr) st.cr2 = *fault_addr;
    if (++delivery_failures >= 3) {
      exit = VmExit{ExitCode::Shutdown, 0, 0, retired};
      return exit;
    }
    delivering = true;
    return std::nullopt;
  };

  // pending event delivery left over from a previous exit
  if (vmcb.exitintinfo != 0) {
    delivering = true;
    delivery_failures = 1;
    vmcb.exitintinfo = 0;
  }

  for (uint64_t step = 0; step < step_budget; ++step) {
    Gva fetch_at = delivering ? st.idtr_base : rip;

    auto tr = detail::translate(m, vmcb.asid, fetch_at, wctx);
    if (auto* npf = std::get_if<NestedPageFault>(&tr)) {
      uint64_t intinfo = delivering ? (0x80000B0EULL | (uint64_t(delivery_failures) << 32)) : 0;
      return finish(VmExit{ExitCode::Npf, npf->faulting_gpa, intinfo, retired}, st, rip);
    }
    if (auto* rf = std::get_if<RmpFault>(&tr)) {
      return finish(VmExit{ExitCode::RmpFault, rf->gpa, 0, retired}, st, rip);
    }
    if (std::holds_alternative<GuestPageFault>(tr)) {
      if (auto done = raise_guest_fault(fetch_at)) return finish(*done, st, rip);
      continue;
    }
    if (delivering) {
      // handler fetch succeeded: control transfers
      delivering = false;
      delivery_failures = 0;
      rip = st.idtr_base;
      continue;
    }

    // fetch up to 8 instruction bytes, page-crossing aware
    uint8_t bytes[8];
    size_t have = 0;
    while (have < sizeof(bytes)) {
      Gva a = rip + have;
      detail::TranslateResult btr =
          (page_of(a) == page_of(rip)) ? tr : detail::translate(m, vmcb.asid, a, wctx);
      if (auto* ok = std::get_if<detail::TranslateOk>(&btr)) {
        KeySelection key =
            sev ? select_key(true, false, vmcb.asid, true) : KeySelection{KeyKind::Plaintext, 0};
        bytes[have] = 0;
        m.read_bytes(page_of(ok->spa) | (a & kPageMask), vmcb.asid, key, &bytes[have], 1);
        ++have;
      } else {
        break;  // decode with what we have; faults surface on demand below
      }
    }

    Decoded d = decode_instruction(bytes, have);
    if (d.kind == Decoded::Undefined) {
      if (auto done = raise_guest_fault(std::nullopt)) return finish(*done, st, rip);
      continue;
    }

    switch (d.kind) {
      case Decoded::Cpuid:
        // intercept: exits with RIP at the instruction; hypervisor emulates
        return finish(VmExit{ExitCode::Cpuid, 0, 0, retired}, st, rip);
      case Decoded::MovImm32:
        st.regs[d.reg] = d.imm;  // 32-bit write zero-extends
        ++retired;
        rip += d.len;
        break;
      case Decoded::JmpRel8:
        ++retired;
        rip += d.len + d.rel;
        break;
      case Decoded::MovLoad:
      case Decoded::MovStore: {
        Gva addr = st.regs[d.addr_reg];
        if (!is_canonical(addr)) {
          if (auto done = raise_guest_fault(addr)) return finish(*done, st, rip);
          continue;
        }
        auto dtr = detail::translate(m, vmcb.asid, addr, wctx);
        if (auto* npf = std::get_if<NestedPageFault>(&dtr))
          return finish(VmExit{ExitCode::Npf, npf->faulting_gpa, 0, retired}, st, rip);
        if (auto* rf = std::get_if<RmpFault>(&dtr))
          return finish(VmExit{ExitCode::RmpFault, rf->gpa, 0, retired}, st, rip);
        if (std::holds_alternative<GuestPageFault>(dtr)) {
          if (auto done = raise_guest_fault(addr)) return finish(*done, st, rip);
          continue;
        }
        auto ok = std::get<detail::TranslateOk>(dtr);
        KeySelection key = sev ? select_key(ok.gc, ok.nc, vmcb.asid)
                               : KeySelection{KeyKind::Plaintext, 0};
        if (d.kind == Decoded::MovLoad) {
          st.regs[d.reg] = m.read8(ok.spa, vmcb.asid, key);
        } else {
          m.write8(ok.spa, vmcb.asid, key, st.regs[d.reg]);
        }
        ++retired;
        rip += d.len;
        break;
      }
      case Decoded::Undefined:
        break;  // handled above
    }
  }
  return finish(VmExit{ExitCode::StepBudget, 0, 0, retired}, st, rip);
}

}  // namespace sevsim

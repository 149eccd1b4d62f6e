#pragma once

// The simulated SoC: DRAM (ciphertext at rest), ASID-tagged TLB and cache,
// protected DRAM for VMSA digests, the optional RMP, and the nested walk.

#include <array>
#include <cstring>
#include <map>
#include <optional>
#include <variant>
#include <vector>

#include "sevsim/crypto.hpp"
#include "sevsim/paging.hpp"
#include "sevsim/trace.hpp"
#include "sevsim/types.hpp"

namespace sevsim {

struct MachineConfig {
  uint64_t tweak_seed = 1;
  uint64_t key_seed = 2;
  uint32_t max_all_asid = 32768;    // CPUID 8000000A[EBX]
  uint32_t max_sev_asid = 15;       // CPUID 8000001F[ECX]
  uint32_t min_sev_non_es = 5;      // CPUID 8000001F[EDX]; ASIDs 1..4 are SEV-ES
  bool snp_mode = false;
};

class PhysicalMemory {
 public:
  uint8_t* page(Spa spa) {
    return pages_[pfn_of(strip_cbit(spa))].data();
  }
  const uint8_t* page_if_present(Spa spa) const {
    auto it = pages_.find(pfn_of(strip_cbit(spa)));
    return it == pages_.end() ? nullptr : it->second.data();
  }

  void read_raw(Spa spa, uint8_t* out, size_t n) {
    for (size_t i = 0; i < n;) {
      Spa a = strip_cbit(spa) + i;
      size_t chunk = std::min(n - i, kPageSize - (a & kPageMask));
      std::memcpy(out + i, page(a) + (a & kPageMask), chunk);
      i += chunk;
    }
  }

  void write_raw(Spa spa, const uint8_t* data, size_t n) {
    for (size_t i = 0; i < n;) {
      Spa a = strip_cbit(spa) + i;
      size_t chunk = std::min(n - i, kPageSize - (a & kPageMask));
      std::memcpy(page(a) + (a & kPageMask), data + i, chunk);
      i += chunk;
    }
  }

  uint64_t read_raw_u64(Spa spa) {
    uint64_t v;
    read_raw(spa, reinterpret_cast<uint8_t*>(&v), 8);
    return v;
  }

  U128 read_raw_block(Spa spa) {
    U128 b;
    read_raw(spa, reinterpret_cast<uint8_t*>(&b.lo), 8);
    read_raw(spa + 8, reinterpret_cast<uint8_t*>(&b.hi), 8);
    return b;
  }

  void write_raw_block(Spa spa, U128 b) {
    write_raw(spa, reinterpret_cast<const uint8_t*>(&b.lo), 8);
    write_raw(spa + 8, reinterpret_cast<const uint8_t*>(&b.hi), 8);
  }

  const std::map<uint64_t, std::array<uint8_t, kPageSize>>& pages() const { return pages_; }

 private:
  std::map<uint64_t, std::array<uint8_t, kPageSize>> pages_;
};

struct TlbEntry {
  Asid asid = 0;
  Gva gva_page = 0;
  Spa spa_page = 0;
  bool gc = false;
  bool nc = false;
};

class Tlb {
 public:
  const TlbEntry* lookup(Asid asid, Gva gva) const {
    auto it = entries_.find({asid, page_of(gva)});
    return it == entries_.end() ? nullptr : &it->second;
  }

  void insert(const TlbEntry& e) { entries_[{e.asid, e.gva_page}] = e; }

  void flush_asid(Asid asid) {
    std::erase_if(entries_, [&](const auto& kv) { return kv.first.first == asid; });
  }

  void flush_all() { entries_.clear(); }

  size_t size() const { return entries_.size(); }

 private:
  std::map<std::pair<Asid, Gva>, TlbEntry> entries_;
};

// 64-byte lines, fully associative, explicit-flush only. A hit needs the
// (line, asid, gC^nC) tag to match; writeback re-encrypts under the fill key.
struct CacheLine {
  Spa spa_line = 0;
  Asid asid = 0;
  bool cbit = false;  // gC ^ nC, per the tag conjecture
  KeySelection key{KeyKind::Plaintext, 0};
  std::array<uint8_t, 64> data{};
  bool dirty = false;
};

class Cache;

struct ProtectedDram {
  std::map<Spa, uint64_t> digests;  // VMSA spa -> digest of plaintext
};

struct RmpEntry {
  Asid asid = 0;
  uint64_t gpfn = 0;
};

struct Rmp {
  std::map<uint64_t, RmpEntry> entries;  // spfn -> owner

  void validate(Spa spa, Asid asid, Gpa gpa) {
    entries[pfn_of(strip_cbit(spa))] = RmpEntry{asid, pfn_of(strip_cbit(gpa))};
  }

  // pass iff no entry (hypervisor page) or both ASID and gPA match
  bool check(Spa spa, Asid asid, Gpa gpa) const {
    auto it = entries.find(pfn_of(strip_cbit(spa)));
    if (it == entries.end()) return true;
    return it->second.asid == asid && it->second.gpfn == pfn_of(strip_cbit(gpa));
  }
};

struct WalkSuccess {
  Spa spa = 0;
  bool gc = false;
  bool nc = false;
};
struct GuestPageFault {
  Gva gva = 0;
};
struct RmpFault {
  Gpa gpa = 0;
  Spa spa = 0;
};
using WalkResult = std::variant<WalkSuccess, GuestPageFault, NestedPageFault, RmpFault>;

struct WalkContext {
  Gpa gcr3 = 0;
  const NestedPageTable* npt = nullptr;
  Asid asid = 0;
  bool sev = true;  // non-SEV guests walk plaintext page tables
};

class Machine {
 public:
  explicit Machine(const MachineConfig& cfg = {})
      : config(cfg), engine(cfg.tweak_seed, cfg.key_seed) {}

  MachineConfig config;
  CryptoEngine engine;
  PhysicalMemory dram;
  Tlb tlb;
  ProtectedDram protected_dram;
  Rmp rmp;
  TraceWriter* trace = nullptr;
  uint64_t oracle_reads = 0;  // audit counter; must not move during attack phases

  // ---- cached, key-selected memory path ----

  uint64_t read8(Spa spa, Asid asid, KeySelection key) {
    CacheLine& line = fill(spa, asid, key);
    uint64_t v;
    std::memcpy(&v, line.data.data() + (spa & 63), 8);
    return v;
  }

  void write8(Spa spa, Asid asid, KeySelection key, uint64_t v) {
    CacheLine& line = fill(spa, asid, key);
    std::memcpy(line.data.data() + (spa & 63), &v, 8);
    line.dirty = true;
  }

  void read_bytes(Spa spa, Asid asid, KeySelection key, uint8_t* out, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      CacheLine& line = fill(spa + i, asid, key);
      out[i] = line.data[(spa + i) & 63];
    }
  }

  void wbinvd() {
    for (auto& [tag, line] : cache_) {
      if (line.dirty) writeback(line);
    }
    cache_.clear();
    engine.note_wbinvd();
  }

  void df_flush() { engine.df_flush(); }

  size_t cache_lines() const { return cache_.size(); }

  // ---- the two-level walk ----

  WalkResult guest_walk(Gva gva, const WalkContext& ctx, bool install_tlb = true) {
    if (!is_canonical(gva)) throw Error(Err::NonCanonicalAddress);
    uint64_t table_base = page_of(strip_cbit(ctx.gcr3));
    bool leaf_gc = true;
    for (int level = 1; level <= 4; ++level) {
      Gpa entry_gpa = table_base | (walk_index(gva, level) * 8);
      auto tr = nested_translate(entry_gpa, *ctx.npt);
      if (auto* npf = std::get_if<NestedPageFault>(&tr)) return *npf;
      Spa spa = std::get<Spa>(tr);
      if (config.snp_mode && !rmp.check(spa, ctx.asid, entry_gpa))
        return RmpFault{entry_gpa, spa};
      // gPT pages are guest-private whenever the guest is encrypted
      KeySelection pt_key = ctx.sev ? select_key(true, false, ctx.asid, true)
                                    : KeySelection{KeyKind::Plaintext, 0};
      uint64_t raw = read8(spa, ctx.asid, pt_key);
      if (!pte_is_leakable(raw, level == 4)) return GuestPageFault{gva};
      Pte pte{raw};
      leaf_gc = pte.cbit();
      table_base = (pte.pfn() & ~kPfnCbitMask) << kPfnShift;
    }
    Gpa data_gpa = table_base | (gva & kPageMask);
    auto tr = nested_translate(data_gpa, *ctx.npt);
    if (auto* npf = std::get_if<NestedPageFault>(&tr)) return *npf;
    Spa spa = std::get<Spa>(tr);
    if (config.snp_mode && !rmp.check(spa, ctx.asid, data_gpa)) return RmpFault{data_gpa, spa};
    bool nc = npt_nc_bit(data_gpa, *ctx.npt);
    if (install_tlb)
      tlb.insert(TlbEntry{ctx.asid, page_of(gva), page_of(spa), leaf_gc, nc});
    return WalkSuccess{spa, leaf_gc, nc};
  }

  // ---- test-oracle path: decrypts directly, never used by attacks ----

  uint64_t oracle_read8(Spa spa, Asid asid) {
    ++oracle_reads;
    KeySelection key{KeyKind::GuestKey, asid};
    // dirty cache lines shadow DRAM
    auto it = cache_.find(line_tag(spa, asid, true));
    if (it != cache_.end()) {
      uint64_t v;
      std::memcpy(&v, it->second.data.data() + (spa & 63), 8);
      return v;
    }
    U128 block = decrypt_at(spa & ~0xFULL, key);
    return (spa & 8) ? block.hi : block.lo;
  }

  void oracle_read_page(Spa spa_page, Asid asid, uint8_t* out4096) {
    for (uint64_t off = 0; off < kPageSize; off += 8) {
      uint64_t v = oracle_read8(page_of(spa_page) + off, asid);
      std::memcpy(out4096 + off, &v, 8);
    }
  }

  // launch-time image install: encrypts plaintext straight into DRAM
  void install_encrypted_page(Spa spa_page, Asid asid, const uint8_t* plain4096) {
    for (uint64_t off = 0; off < kPageSize; off += 16) {
      U128 m;
      std::memcpy(&m.lo, plain4096 + off, 8);
      std::memcpy(&m.hi, plain4096 + off + 8, 8);
      dram.write_raw_block(page_of(spa_page) + off,
                           engine.encrypt_block(asid, page_of(spa_page) + off, m));
    }
  }

  void install_plain_page(Spa spa_page, const uint8_t* plain4096) {
    dram.write_raw(page_of(spa_page), plain4096, kPageSize);
  }

 private:
  using Tag = std::tuple<Spa, Asid, bool>;

  static Tag line_tag(Spa spa, Asid asid, bool cbit) {
    return {strip_cbit(spa) & ~63ULL, asid, cbit};
  }

  U128 decrypt_at(Spa block_addr, KeySelection key) {
    U128 raw = dram.read_raw_block(block_addr);
    switch (key.kind) {
      case KeyKind::Plaintext: return raw;
      case KeyKind::GuestKey: return engine.decrypt_block(key.asid, block_addr, raw);
      case KeyKind::HostKey: return engine.decrypt_block(kHostAsid, block_addr, raw);
    }
    return raw;
  }

  void encrypt_to(Spa block_addr, KeySelection key, U128 m) {
    switch (key.kind) {
      case KeyKind::Plaintext: dram.write_raw_block(block_addr, m); return;
      case KeyKind::GuestKey:
        dram.write_raw_block(block_addr, engine.encrypt_block(key.asid, block_addr, m));
        return;
      case KeyKind::HostKey:
        dram.write_raw_block(block_addr, engine.encrypt_block(kHostAsid, block_addr, m));
        return;
    }
  }

  CacheLine& fill(Spa spa, Asid asid, KeySelection key) {
    bool cbit = key.kind != KeyKind::Plaintext;
    Tag tag = line_tag(spa, asid, cbit);
    auto it = cache_.find(tag);
    if (it != cache_.end()) return it->second;
    CacheLine line;
    line.spa_line = std::get<0>(tag);
    line.asid = asid;
    line.cbit = cbit;
    line.key = key;
    for (int i = 0; i < 4; ++i) {
      U128 b = decrypt_at(line.spa_line + 16 * i, key);
      std::memcpy(line.data.data() + 16 * i, &b.lo, 8);
      std::memcpy(line.data.data() + 16 * i + 8, &b.hi, 8);
    }
    return cache_.emplace(tag, line).first->second;
  }

  void writeback(const CacheLine& line) {
    for (int i = 0; i < 4; ++i) {
      U128 b;
      std::memcpy(&b.lo, line.data.data() + 16 * i, 8);
      std::memcpy(&b.hi, line.data.data() + 16 * i + 8, 8);
      encrypt_to(line.spa_line + 16 * i, line.key, b);
    }
  }

  std::map<Tag, CacheLine> cache_;
};

}  // namespace sevsim

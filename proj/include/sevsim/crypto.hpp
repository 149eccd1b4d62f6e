#pragma once

// AMD-SP model: VEK store indexed by ASID, ACTIVATE/DEACTIVATE lifecycle,
// and the physical-address-tweaked block cipher used for all memory traffic.

#include <array>
#include <map>
#include <set>

#include "sevsim/types.hpp"

namespace sevsim {

inline constexpr Asid kHostAsid = 0;

// Per-address tweak: T(A) = XOR of t_i over the set bits of A.
// 48 vectors, one per physical-address bit; full 128-bit entropy per vector.
struct TweakTable {
  std::array<U128, kPhysAddrBits> t{};
  uint64_t seed = 0;

  explicit TweakTable(uint64_t tweak_seed = 0) : seed(tweak_seed) {
    SplitMix64 rng(tweak_seed);
    for (auto& v : t) {
      v.lo = rng.next();
      v.hi = rng.next();
    }
  }

  U128 tweak(uint64_t addr) const {
    addr &= kPhysAddrMask;
    U128 mask;
    for (int i = 0; i < kPhysAddrBits; ++i)
      if (addr & (1ULL << i)) mask ^= t[i];
    return mask;
  }
};

struct Vek {
  U128 key;
  Asid asid = 0;
};

enum class KeyKind { Plaintext, GuestKey, HostKey };

struct KeySelection {
  KeyKind kind;
  Asid asid = 0;  // meaningful for GuestKey
  friend bool operator==(const KeySelection&, const KeySelection&) = default;
};

// Table-driven key choice from the gC/nC bit pair. Instruction fetches and
// page-table-page reads are always guest-private regardless of gC.
inline KeySelection select_key(bool gc, bool nc, Asid guest_asid, bool forced_private = false) {
  if (forced_private || gc) return {KeyKind::GuestKey, guest_asid};
  if (nc) return {KeyKind::HostKey, kHostAsid};
  return {KeyKind::Plaintext, 0};
}

class CryptoEngine {
 public:
  CryptoEngine(uint64_t tweak_seed, uint64_t key_seed)
      : tweaks_(tweak_seed), keygen_(key_seed) {
    // host key under pseudo-ASID 0, always active
    active_[kHostAsid] = fresh_vek(kHostAsid);
  }

  const TweakTable& tweak_table() const { return tweaks_; }
  U128 tweak(uint64_t addr) const { return tweaks_.tweak(addr); }

  bool is_active(Asid asid) const { return active_.count(asid) != 0; }

  void activate(Asid asid) {
    if (asid == kHostAsid) throw Error(Err::IllegalAsidRange, "ASID 0 is reserved");
    if (active_.count(asid)) throw Error(Err::AsidAlreadyActive);
    if (pending_flush_.count(asid)) {
      if (!wbinvd_done_) throw Error(Err::WbinvdRequired);
      if (!dfflush_done_) throw Error(Err::DfflushRequired);
      pending_flush_.erase(asid);
    }
    active_[asid] = fresh_vek(asid);
  }

  void deactivate(Asid asid) {
    if (asid == kHostAsid || !active_.count(asid)) throw Error(Err::UnknownAsid);
    active_.erase(asid);
    pending_flush_.insert(asid);
    wbinvd_done_ = false;
    dfflush_done_ = false;
  }

  void note_wbinvd() { wbinvd_done_ = true; }
  void df_flush() { dfflush_done_ = true; }

  // c = E_K(m ^ T(A)); 16-byte blocks, 16-byte-aligned physical addresses.
  U128 encrypt_block(Asid asid, Spa addr, U128 m) const {
    check_aligned(addr);
    return permute(vek(asid).key, m ^ tweaks_.tweak(strip_cbit(addr)));
  }

  U128 decrypt_block(Asid asid, Spa addr, U128 c) const {
    check_aligned(addr);
    return unpermute(vek(asid).key, c) ^ tweaks_.tweak(strip_cbit(addr));
  }

 private:
  static void check_aligned(Spa addr) {
    if (addr & 0xF) throw Error(Err::UnalignedAddress);
  }

  const Vek& vek(Asid asid) const {
    auto it = active_.find(asid);
    if (it == active_.end()) throw Error(Err::UnknownAsid);
    return it->second;
  }

  Vek fresh_vek(Asid asid) {
    SplitMix64 rng(keygen_.next() ^ (0xA51Dull << 32) ^ asid);
    return Vek{{rng.next(), rng.next()}, asid};
  }

  // Keyed 128-bit Feistel permutation. The attacks only rely on key identity
  // and the tweak, so any bijective keyed permutation satisfies the model.
  static uint64_t round_fn(uint64_t x, uint64_t k) {
    uint64_t z = x ^ k;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static std::array<uint64_t, 8> subkeys(U128 key) {
    SplitMix64 rng(key.lo ^ (key.hi * 0x9E3779B97F4A7C15ULL));
    std::array<uint64_t, 8> ks{};
    for (auto& k : ks) k = rng.next();
    return ks;
  }

  static U128 permute(U128 key, U128 m) {
    auto ks = subkeys(key);
    uint64_t l = m.lo, r = m.hi;
    for (int i = 0; i < 8; ++i) {
      uint64_t nl = r;
      uint64_t nr = l ^ round_fn(r, ks[i]);
      l = nl;
      r = nr;
    }
    return {l, r};
  }

  static U128 unpermute(U128 key, U128 c) {
    auto ks = subkeys(key);
    uint64_t l = c.lo, r = c.hi;
    for (int i = 7; i >= 0; --i) {
      uint64_t pr = l;
      uint64_t pl = r ^ round_fn(pr, ks[i]);
      l = pl;
      r = pr;
    }
    return {l, r};
  }

  TweakTable tweaks_;
  SplitMix64 keygen_;
  std::map<Asid, Vek> active_;
  std::set<Asid> pending_flush_;
  bool wbinvd_done_ = false;
  bool dfflush_done_ = false;
};

}  // namespace sevsim

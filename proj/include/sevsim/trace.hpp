#pragma once

// Line-delimited JSON trace records; byte-deterministic per seed.
// Field contract documented in docs/trace.md.

#include <cstdint>
#include <memory>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace sevsim {

class TraceWriter {
 public:
  // out may be null: records are still counted so step numbering is stable.
  explicit TraceWriter(std::ostream* out = nullptr) : out_(out) {}

  uint64_t emit(const std::string& kind, nlohmann::ordered_json payload) {
    uint64_t s = step_++;
    if (out_) {
      nlohmann::ordered_json rec;
      rec["step"] = s;
      rec["kind"] = kind;
      for (auto& [k, v] : payload.items()) rec[k] = v;
      *out_ << rec.dump() << "\n";
    }
    return s;
  }

  void header(const nlohmann::ordered_json& meta) {
    if (out_) {
      nlohmann::ordered_json rec;
      rec["step"] = step_++;
      rec["kind"] = "HEADER";
      for (auto& [k, v] : meta.items()) rec[k] = v;
      *out_ << rec.dump() << "\n";
    } else {
      step_++;
    }
  }

  uint64_t steps() const { return step_; }

 private:
  std::ostream* out_;
  uint64_t step_ = 0;
};

inline std::string hex(uint64_t v) {
  char buf[20];
  snprintf(buf, sizeof(buf), "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace sevsim

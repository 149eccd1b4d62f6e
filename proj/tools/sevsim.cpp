// Scenario runner and corpus scanner front end.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "sevsim/scanner.hpp"
#include "sevsim/scenarios.hpp"
#include "sevsim/vm_core.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw sevsim::Error(sevsim::Err::ConfigParseError, "cannot open " + path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw sevsim::Error(sevsim::Err::ConfigParseError, e.what());
  }
  if (const char* seed = std::getenv("SEED")) cfg["seed"] = std::stoull(seed);
  return cfg;
}

void write_report(std::ostream& out, const sevsim::ScenarioResult& res) {
  out << "scenario: " << res.name << "\n";
  out << "status:   " << (res.passed ? "PASS" : "FAIL") << "\n\n";
  for (const auto& line : res.report) out << "  " << line << "\n";
  out << "\nresult:\n" << res.result.dump(2) << "\n";
}

struct RunOutcome {
  std::string config;
  bool passed = false;
  bool parse_error = false;
  std::string message;
};

RunOutcome run_one(const std::string& cfg_path, const std::string& trace_path,
                   const std::string& report_path, const std::string& result_path) {
  RunOutcome out;
  out.config = cfg_path;
  try {
    json cfg = load_config(cfg_path);
    std::ofstream trace_file;
    std::unique_ptr<sevsim::TraceWriter> tw;
    if (!trace_path.empty()) {
      trace_file.open(trace_path);
      tw = std::make_unique<sevsim::TraceWriter>(&trace_file);
    }
    sevsim::ScenarioResult res = sevsim::run_scenario(cfg, tw.get());
    if (!report_path.empty()) {
      std::ofstream rf(report_path);
      write_report(rf, res);
    }
    if (!result_path.empty()) {
      std::ofstream res_file(result_path);
      res_file << res.result.dump(2) << "\n";
    }
    std::ostringstream summary;
    write_report(summary, res);
    out.message = summary.str();
    out.passed = res.passed;
  } catch (const sevsim::Error& e) {
    out.message = std::string("error: ") + e.what();
    out.parse_error = e.kind == sevsim::Err::ConfigParseError;
  } catch (const std::exception& e) {
    out.message = std::string("error: ") + e.what();
  }
  return out;
}

std::string derived_path(const std::string& dir, const std::string& cfg_path,
                         const std::string& suffix) {
  if (dir.empty()) return "";
  fs::create_directories(dir);
  return (fs::path(dir) / (fs::path(cfg_path).stem().string() + suffix)).string();
}

int cmd_run(const std::vector<std::string>& configs, const std::string& trace_path,
            const std::string& report_path, const std::string& result_path, unsigned jobs) {
  std::vector<RunOutcome> outcomes(configs.size());
  if (configs.size() == 1) {
    outcomes[0] = run_one(configs[0], trace_path, report_path, result_path);
  } else {
    // batch mode: output flags name directories, one file per config
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (size_t i = next++; i < configs.size(); i = next++) {
        outcomes[i] = run_one(configs[i], derived_path(trace_path, configs[i], ".trace.jsonl"),
                              derived_path(report_path, configs[i], ".report.txt"),
                              derived_path(result_path, configs[i], ".result.json"));
      }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::max(1u, jobs); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  bool all_passed = true, any_parse_error = false;
  for (const auto& o : outcomes) {
    if (configs.size() > 1) std::cout << "==== " << o.config << " ====\n";
    std::cout << o.message << "\n";
    all_passed &= o.passed;
    any_parse_error |= o.parse_error;
  }
  if (any_parse_error) return 2;
  return all_passed ? 0 : 1;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cmd_scan(const std::vector<std::string>& inputs, bool pte, bool last_level,
             const std::vector<std::string>& gadget_hex, const std::string& out_path) {
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
    } else {
      files.push_back(in);
    }
  }

  std::vector<sevsim::BytePattern> patterns;
  for (const auto& h : gadget_hex) patterns.push_back(sevsim::parse_hex_pattern(h));

  std::ofstream out_file;
  std::ostream* out = &std::cout;
  if (!out_path.empty()) {
    out_file.open(out_path);
    out = &out_file;
  }

  for (const auto& f : files) {
    auto bytes = read_file(f);
    ordered_json rec;
    rec["file"] = f;
    if (pte) {
      auto rep = sevsim::scan_pte_fraction(bytes, last_level, f);
      rec["total_blocks"] = rep.total_blocks;
      rec["leakable_blocks"] = rep.leakable_blocks;
      rec["fraction"] = rep.fraction;
    }
    if (!patterns.empty()) {
      auto hits = sevsim::scan_gadgets(bytes, patterns);
      ordered_json jh = ordered_json::array();
      for (const auto& h : hits)
        jh.push_back({{"offset", sevsim::hex(h.offset)}, {"pattern", h.pattern_id}});
      rec["gadgets"] = jh;
    }
    *out << rec.dump() << "\n";
  }
  return 0;
}

// Offset-accurate control-block image with distinctive field values; the
// bit-exact contract for golden-file comparisons.
int cmd_dump_vmcb(const std::string& out_path) {
  sevsim::Vmcb v;
  v.asid = 0x00000005;
  v.tlb_control = 0x01;
  v.virt_int_ctl = 0x0000000000000100ULL;
  v.exitcode = 0x0000000000000400ULL;
  v.exitinfo1 = 0x1111111111111111ULL;
  v.exitinfo2 = 0x0000712345678000ULL;
  v.exitintinfo = 0x2222222222222222ULL;
  v.sev_bits = 0x0000000000000002ULL;
  v.ghcb_gpa = 0x3333333333333000ULL;
  v.ncr3 = 0x4444444444444000ULL;
  v.clean_bits = 0x00000004;
  v.nrip = 0x0000008000000000ULL;
  v.vmsa_ptr = 0x5555555555555000ULL;
  v.save.rip = 0x0000000000400000ULL;
  v.save.rflags = 0x0000000000000202ULL;
  v.save.gcr3 = 0x8000000000100000ULL;
  v.save.idtr_base = 0x0000000000400000ULL;
  v.save.cr2 = 0x6666666666666666ULL;
  for (int i = 0; i < 16; ++i) v.save.regs[i] = 0x0101010101010101ULL * (i + 1);
  auto bytes = sevsim::vmcb_dump(v);
  if (out_path.empty()) {
    std::cout.write(reinterpret_cast<const char*>(bytes.data()),
                    static_cast<std::streamsize>(bytes.size()));
  } else {
    std::ofstream out(out_path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-VM isolation simulator and attack scenario runner"};
  app.require_subcommand(1);

  std::vector<std::string> configs;
  std::string trace_path, report_path, result_path;
  unsigned jobs = 1;
  auto* run = app.add_subcommand("run", "run scenario config(s)");
  run->add_option("config", configs, "scenario config file(s)")->required();
  run->add_option("--trace", trace_path, "trace output path (directory in batch mode)");
  run->add_option("--report", report_path, "report output path (directory in batch mode)");
  run->add_option("--result", result_path, "machine-readable result path");
  run->add_option("--jobs", jobs, "parallel workers in batch mode");

  std::vector<std::string> scan_inputs, gadget_hex;
  bool pte = false, last_level = false;
  std::string scan_out;
  auto* scan = app.add_subcommand("scan", "scan binary files");
  scan->add_option("file", scan_inputs, "file(s) or directory to scan")->required();
  scan->add_flag("--pte", pte, "report the plausible-PTE block fraction");
  scan->add_flag("--last-level", last_level, "apply the last-level predicate");
  scan->add_option("--gadget", gadget_hex, "hex byte pattern (?? wildcards) to locate");
  scan->add_option("--out", scan_out, "write records to a file instead of stdout");

  auto* list = app.add_subcommand("list-scenarios", "list available scenarios");

  std::string vmcb_out;
  auto* dump = app.add_subcommand("dump-vmcb", "emit the reference control-block binary");
  dump->add_option("--out", vmcb_out, "output path (stdout if omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(configs, trace_path, report_path, result_path, jobs);
    if (scan->parsed()) return cmd_scan(scan_inputs, pte, last_level, gadget_hex, scan_out);
    if (list->parsed()) {
      for (const auto& n : sevsim::scenario_names()) std::cout << n << "\n";
      return 0;
    }
    if (dump->parsed()) return cmd_dump_vmcb(vmcb_out);
  } catch (const sevsim::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind == sevsim::Err::ConfigParseError ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "iro/dram.hpp"
#include "iro/oram.hpp"

namespace iro {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TraceOp {
  Op op = Op::read;
  std::uint64_t addr = 0;
  friend bool operator==(const TraceOp&, const TraceOp&) = default;
};

// `R <hex>` / `W <hex>` per line; blank lines and `#` comments are skipped.
std::vector<TraceOp> parse_trace(std::istream& in);
void write_trace(std::ostream& out, const std::vector<TraceOp>& trace);

enum class TraceKind { uniform, zipfian };

struct SyntheticSpec {
  TraceKind kind = TraceKind::uniform;
  std::uint64_t n = 0;
  std::uint64_t footprint = 1;
  double zipf_s = 1.0;
  // "uniform,100000,4096" or "zipfian,100000,4096[,s]"
  static SyntheticSpec parse(const std::string& s);
};

// Reads and writes are equally likely.
std::vector<TraceOp> generate_trace(TraceKind kind, std::uint64_t n, std::uint64_t footprint, std::uint64_t seed,
                                    double zipf_s = 1.0);
inline std::vector<TraceOp> generate_trace(const SyntheticSpec& s, std::uint64_t seed) {
  return generate_trace(s.kind, s.n, s.footprint, seed, s.zipf_s);
}

// Payload a simulated write stores; lets any reader check what it got back.
Data payload_for(std::uint64_t addr, std::uint64_t op_index);

enum class AttackKind { tamper_bit, replay_block, swap_blocks };
std::string to_string(AttackKind k);

// tamper_bit:<access>[:<block>[:<bit>]]
// replay_block:<capture access>:<access>[:<block>]
// swap_blocks:<access>[:<block>:<block>]
// Missing blocks are drawn from the metadata blocks of written buckets.
struct AttackSpec {
  AttackKind kind = AttackKind::tamper_bit;
  std::uint64_t at = 0;
  std::uint64_t capture_at = 0;
  std::optional<std::uint64_t> block;
  std::optional<std::uint64_t> other;
  std::optional<std::uint32_t> bit;
  static AttackSpec parse(const std::string& s);
};

// Mutates DRAM behind the controller's back; returns false if the attack
// had nothing to change (e.g. replaying an unchanged block).
bool tamper_bit(Dram& d, std::uint64_t block, std::uint32_t bit);
bool replay_block(Dram& d, std::uint64_t block, const Block576& captured);
bool swap_blocks(Dram& d, std::uint64_t a, std::uint64_t b);

struct SimConfig {
  Scheme scheme = Scheme::rim;
  OramConfig oram;
  std::optional<DramGeometry> dram;
  std::uint64_t seed = 1;
  std::uint64_t error_interval = 8'000'000;  // rimre: ticks between injected errors
  std::string fault_schedule;                  // path, empty for none

  // Flat `key = value` lines.
  static SimConfig parse(std::istream& in);
  void set(const std::string& key, const std::string& value);
};

struct StatsReport {
  static constexpr int kSchemaVersion = 1;

  std::string scheme;
  std::string outcome = "clean";  // clean | integrity_violation | unrecoverable
  std::uint64_t ops = 0;
  std::uint64_t metadata_reads = 0, metadata_writes = 0;
  std::uint64_t data_reads = 0, data_writes = 0;
  std::uint64_t must_reads = 0, must_writes = 0;
  std::uint64_t mirror_reads = 0, mirror_writes = 0;
  std::uint64_t total_reads = 0, total_writes = 0;
  std::uint64_t recovery_reads = 0, recovery_writes = 0;
  std::uint64_t accesses = 0;
  std::uint64_t read_paths = 0;
  std::uint64_t dummy_accesses = 0;
  std::uint64_t evictions = 0;
  std::uint64_t early_reshuffles = 0;
  double early_reshuffle_pct = 0.0;  // early reshuffles per Read Path
  std::uint64_t mac_submissions = 0;
  std::uint64_t mac_queue_wait = 0;
  std::uint64_t detections_tamper = 0;
  std::uint64_t detections_replay = 0;
  std::uint64_t detections_splice = 0;
  std::uint64_t detections_error = 0;
  std::uint64_t recoveries_case1 = 0, recoveries_case2 = 0, recoveries_case3 = 0, recoveries_mirror = 0;
  std::uint64_t transient_faults = 0, permanent_faults = 0, device_faults = 0;
  std::uint64_t injected_errors = 0;
  std::uint64_t remaps = 0;
  std::uint64_t must_relocations = 0;
  std::uint64_t stash_peak = 0;
  std::uint64_t ticks = 0;

  static StatsReport from(const Controller& c);
  nlohmann::json to_json() const;
  static StatsReport from_json(const nlohmann::json& j);  // validates the schema
  static std::string csv_header();
  std::string csv_row() const;
};

struct RunResult {
  StatsReport report;
  int exit_code = 0;  // 0 clean, 2 integrity violation, 3 unrecoverable
  std::string message;
  std::string remap_listing;
};

RunResult run(const SimConfig& cfg, const std::vector<TraceOp>& trace, const std::vector<ScheduledFault>& faults = {},
              const std::vector<AttackSpec>& attacks = {});

}  // namespace iro

#include "iro/sim.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "iro/detail/mix.hpp"

namespace iro {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::uint64_t to_u64(const std::string& s, int base = 10) {
  std::uint64_t v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (base == 16 && s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) first += 2;
  auto [p, ec] = std::from_chars(first, last, v, base);
  if (ec != std::errc{} || p != last || first == last) throw ParseError("not an unsigned integer: '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw ParseError("not a number: '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw ParseError("not a number: '" + s + "'");
  }
}

}  // namespace

// --- traces ----------------------------------------------------------------------

std::vector<TraceOp> parse_trace(std::istream& in) {
  std::vector<TraceOp> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::istringstream ss(line);
    std::string op, addr, extra;
    if (!(ss >> op)) continue;
    auto fail = [&](const std::string& why) {
      throw ParseError("trace line " + std::to_string(lineno) + ": " + why);
    };
    if (!(ss >> addr)) fail("missing address");
    if (ss >> extra) fail("trailing text '" + extra + "'");
    TraceOp t;
    if (op == "R" || op == "r")
      t.op = Op::read;
    else if (op == "W" || op == "w")
      t.op = Op::write;
    else
      fail("unknown op '" + op + "'");
    try {
      t.addr = to_u64(addr, 16);
    } catch (const ParseError&) {
      fail("bad hex address '" + addr + "'");
    }
    out.push_back(t);
  }
  return out;
}

void write_trace(std::ostream& out, const std::vector<TraceOp>& trace) {
  for (const auto& t : trace) out << (t.op == Op::read ? 'R' : 'W') << " 0x" << std::hex << t.addr << std::dec << '\n';
}

SyntheticSpec SyntheticSpec::parse(const std::string& s) {
  const auto parts = split(s, ',');
  if (parts.size() < 3 || parts.size() > 4) throw ParseError("synthetic spec is <kind>,<n>,<footprint>[,<s>]");
  SyntheticSpec spec;
  if (parts[0] == "uniform")
    spec.kind = TraceKind::uniform;
  else if (parts[0] == "zipfian")
    spec.kind = TraceKind::zipfian;
  else
    throw ParseError("unknown trace kind '" + parts[0] + "'");
  spec.n = to_u64(parts[1]);
  spec.footprint = to_u64(parts[2]);
  if (parts.size() == 4) spec.zipf_s = to_double(parts[3]);
  if (spec.footprint == 0) throw ParseError("footprint must be positive");
  return spec;
}

std::vector<TraceOp> generate_trace(TraceKind kind, std::uint64_t n, std::uint64_t footprint, std::uint64_t seed,
                                    double zipf_s) {
  if (footprint == 0) throw std::invalid_argument("footprint must be positive");
  std::mt19937_64 rng(seed);
  std::vector<TraceOp> out;
  out.reserve(n);
  std::bernoulli_distribution write(0.5);
  if (kind == TraceKind::uniform) {
    std::uniform_int_distribution<std::uint64_t> addr(0, footprint - 1);
    for (std::uint64_t i = 0; i < n; ++i) out.push_back({write(rng) ? Op::write : Op::read, addr(rng)});
  } else {
    std::vector<double> w(footprint);
    for (std::uint64_t k = 0; k < footprint; ++k) w[k] = 1.0 / std::pow(static_cast<double>(k + 1), zipf_s);
    std::discrete_distribution<std::uint64_t> addr(w.begin(), w.end());
    for (std::uint64_t i = 0; i < n; ++i) out.push_back({write(rng) ? Op::write : Op::read, addr(rng)});
  }
  return out;
}

Data payload_for(std::uint64_t addr, std::uint64_t op_index) {
  Data d{};
  std::uint64_t s = detail::mix(addr, op_index);
  for (auto& w : d) w = s = detail::splitmix64(s);
  return d;
}

// --- attacks -------------------------------------------------------------------

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::tamper_bit: return "tamper_bit";
    case AttackKind::replay_block: return "replay_block";
    case AttackKind::swap_blocks: return "swap_blocks";
  }
  return "?";
}

AttackSpec AttackSpec::parse(const std::string& s) {
  const auto p = split(s, ':');
  if (p.empty()) throw ParseError("empty attack spec");
  AttackSpec a;
  auto num = [&](std::size_t i) { return to_u64(p.at(i)); };
  if (p[0] == "tamper_bit") {
    if (p.size() < 2 || p.size() > 4) throw ParseError("tamper_bit:<access>[:<block>[:<bit>]]");
    a.kind = AttackKind::tamper_bit;
    a.at = num(1);
    if (p.size() > 2) a.block = num(2);
    if (p.size() > 3) a.bit = static_cast<std::uint32_t>(num(3));
    if (a.bit && *a.bit >= kBlockBits) throw ParseError("tamper bit outside the block");
  } else if (p[0] == "replay_block") {
    if (p.size() < 3 || p.size() > 4) throw ParseError("replay_block:<capture>:<access>[:<block>]");
    a.kind = AttackKind::replay_block;
    a.capture_at = num(1);
    a.at = num(2);
    if (a.capture_at >= a.at) throw ParseError("replay must capture before it restores");
    if (p.size() > 3) a.block = num(3);
  } else if (p[0] == "swap_blocks") {
    if (p.size() != 2 && p.size() != 4) throw ParseError("swap_blocks:<access>[:<block>:<block>]");
    a.kind = AttackKind::swap_blocks;
    a.at = num(1);
    if (p.size() == 4) a.block = num(2), a.other = num(3);
  } else {
    throw ParseError("unknown attack '" + p[0] + "'");
  }
  return a;
}

bool tamper_bit(Dram& d, std::uint64_t block, std::uint32_t bit) {
  Block576 b = d.peek(block);
  b.flip_bit(bit);
  d.poke(block, b);
  return true;
}

bool replay_block(Dram& d, std::uint64_t block, const Block576& captured) {
  if (d.peek(block) == captured) return false;
  d.poke(block, captured);
  return true;
}

bool swap_blocks(Dram& d, std::uint64_t a, std::uint64_t b) {
  const Block576 x = d.peek(a), y = d.peek(b);
  if (x == y) return false;
  d.poke(a, y);
  d.poke(b, x);
  return true;
}

// --- configuration ----------------------------------------------------------------

void SimConfig::set(const std::string& key, const std::string& value) {
  auto u32 = [&] { return static_cast<std::uint32_t>(to_u64(value)); };
  auto geom = [&]() -> MustGeometry& {
    if (!oram.must) oram.must = MustGeometry{};
    return *oram.must;
  };
  auto dg = [&]() -> DramGeometry& {
    if (!dram) dram = DramGeometry{};
    return *dram;
  };
  if (key == "scheme") scheme = parse_scheme(value);
  else if (key == "seed") seed = to_u64(value);
  else if (key == "error_interval") error_interval = to_u64(value);
  else if (key == "fault_schedule") fault_schedule = value;
  else if (key == "tree_levels") oram.tree_levels = u32();
  else if (key == "cached_levels") oram.cached_levels = u32();
  else if (key == "Z") oram.Z = u32();
  else if (key == "S") oram.S = u32();
  else if (key == "A") oram.A = u32();
  else if (key == "stash_capacity") oram.stash_capacity = to_u64(value);
  else if (key == "real_utilization") oram.real_utilization = to_double(value);
  else if (key == "stash_high") oram.stash_high = to_double(value);
  else if (key == "stash_low") oram.stash_low = to_double(value);
  else if (key == "block_cost") oram.block_cost = to_u64(value);
  else if (key == "mac_units") oram.mac_units = to_u64(value);
  else if (key == "mac_latency") oram.mac_latency = to_u64(value);
  else if (key == "remap_capacity") oram.remap_capacity = to_u64(value);
  else if (key == "must_spare_nodes") oram.must_spare_nodes = to_u64(value);
  else if (key == "must_levels") geom().must_levels = u32();
  else if (key == "must_nonleaf_span") geom().nonleaf_span = u32();
  else if (key == "must_leaf_span") geom().leaf_span = u32();
  else if (key == "must_cached_levels") geom().cached_must_levels = u32();
  else if (key == "dram_dimms_per_channel") dg().dimms_per_channel = u32();
  else if (key == "dram_ranks_per_dimm") dg().ranks_per_dimm = u32();
  else if (key == "dram_banks") dg().banks = u32();
  else if (key == "dram_rows") dg().rows = to_u64(value);
  else if (key == "dram_columns") dg().columns = u32();
  else throw ConfigError("unknown config key '" + key + "'");
}

SimConfig SimConfig::parse(std::istream& in) {
  SimConfig c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (c.oram.must) c.oram.must->tree_levels = c.oram.tree_levels;
  return c;
}

// --- reports -------------------------------------------------------------------------

namespace {

using Counter = std::uint64_t StatsReport::*;
const std::vector<std::pair<const char*, Counter>>& counters() {
  static const std::vector<std::pair<const char*, Counter>> c = {
      {"ops", &StatsReport::ops},
      {"metadata_reads", &StatsReport::metadata_reads},
      {"metadata_writes", &StatsReport::metadata_writes},
      {"data_reads", &StatsReport::data_reads},
      {"data_writes", &StatsReport::data_writes},
      {"must_reads", &StatsReport::must_reads},
      {"must_writes", &StatsReport::must_writes},
      {"mirror_reads", &StatsReport::mirror_reads},
      {"mirror_writes", &StatsReport::mirror_writes},
      {"total_reads", &StatsReport::total_reads},
      {"total_writes", &StatsReport::total_writes},
      {"recovery_reads", &StatsReport::recovery_reads},
      {"recovery_writes", &StatsReport::recovery_writes},
      {"accesses", &StatsReport::accesses},
      {"read_paths", &StatsReport::read_paths},
      {"dummy_accesses", &StatsReport::dummy_accesses},
      {"evictions", &StatsReport::evictions},
      {"early_reshuffles", &StatsReport::early_reshuffles},
      {"mac_submissions", &StatsReport::mac_submissions},
      {"mac_queue_wait", &StatsReport::mac_queue_wait},
      {"detections_tamper", &StatsReport::detections_tamper},
      {"detections_replay", &StatsReport::detections_replay},
      {"detections_splice", &StatsReport::detections_splice},
      {"detections_error", &StatsReport::detections_error},
      {"recoveries_case1", &StatsReport::recoveries_case1},
      {"recoveries_case2", &StatsReport::recoveries_case2},
      {"recoveries_case3", &StatsReport::recoveries_case3},
      {"recoveries_mirror", &StatsReport::recoveries_mirror},
      {"transient_faults", &StatsReport::transient_faults},
      {"permanent_faults", &StatsReport::permanent_faults},
      {"device_faults", &StatsReport::device_faults},
      {"injected_errors", &StatsReport::injected_errors},
      {"remaps", &StatsReport::remaps},
      {"must_relocations", &StatsReport::must_relocations},
      {"stash_peak", &StatsReport::stash_peak},
      {"ticks", &StatsReport::ticks},
  };
  return c;
}

}  // namespace

StatsReport StatsReport::from(const Controller& c) {
  const auto& s = c.stats();
  StatsReport r;
  r.scheme = to_string(c.scheme());
  auto k = [](BlockKind b) { return static_cast<std::size_t>(b); };
  r.metadata_reads = s.total.reads[k(BlockKind::metadata)];
  r.metadata_writes = s.total.writes[k(BlockKind::metadata)];
  r.data_reads = s.total.reads[k(BlockKind::data)];
  r.data_writes = s.total.writes[k(BlockKind::data)];
  r.must_reads = s.total.reads[k(BlockKind::must)];
  r.must_writes = s.total.writes[k(BlockKind::must)];
  r.mirror_reads = s.total.reads[k(BlockKind::mirror)];
  r.mirror_writes = s.total.writes[k(BlockKind::mirror)];
  r.total_reads = s.total.total_reads();
  r.total_writes = s.total.total_writes();
  for (auto p : {Phase::recovery, Phase::probe}) {
    r.recovery_reads += s.phase[static_cast<std::size_t>(p)].total_reads();
    r.recovery_writes += s.phase[static_cast<std::size_t>(p)].total_writes();
  }
  r.accesses = s.accesses;
  r.read_paths = s.read_paths;
  r.dummy_accesses = s.dummy_accesses;
  r.evictions = s.evictions;
  r.early_reshuffles = s.early_reshuffles;
  r.early_reshuffle_pct = s.early_reshuffle_ratio();
  r.mac_submissions = c.mac_pool().submissions();
  r.mac_queue_wait = c.mac_pool().total_wait();
  r.recoveries_case1 = s.recoveries[1];
  r.recoveries_case2 = s.recoveries[2];
  r.recoveries_case3 = s.recoveries[3];
  r.recoveries_mirror = s.recoveries[4];
  r.transient_faults = s.transient_faults;
  r.permanent_faults = s.permanent_faults;
  r.device_faults = s.device_faults;
  r.injected_errors = s.injected_errors;
  r.remaps = s.remaps;
  r.must_relocations = s.must_relocations;
  r.stash_peak = s.stash_peak;
  r.ticks = s.ticks;
  return r;
}

nlohmann::json StatsReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["scheme"] = scheme;
  j["outcome"] = outcome;
  for (const auto& [name, field] : counters()) j[name] = this->*field;
  j["early_reshuffle_pct"] = early_reshuffle_pct;
  return j;
}

StatsReport StatsReport::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("report: not an object");
  if (j.value("schema_version", -1) != kSchemaVersion) throw ParseError("report: unsupported schema version");
  StatsReport r;
  try {
    r.scheme = j.at("scheme").get<std::string>();
    r.outcome = j.at("outcome").get<std::string>();
    for (const auto& [name, field] : counters()) {
      const auto& v = j.at(name);
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
        throw ParseError(std::string("report: field ") + name + " is not a count");
      r.*field = v.get<std::uint64_t>();
    }
    r.early_reshuffle_pct = j.at("early_reshuffle_pct").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("report: ") + e.what());
  }
  if (j.size() != counters().size() + 4) throw ParseError("report: unexpected fields");
  return r;
}

std::string StatsReport::csv_header() {
  std::string h = "schema_version,scheme,outcome";
  for (const auto& [name, field] : counters()) h += std::string(",") + name;
  return h + ",early_reshuffle_pct";
}

std::string StatsReport::csv_row() const {
  std::ostringstream os;
  os << kSchemaVersion << ',' << scheme << ',' << outcome;
  for (const auto& [name, field] : counters()) os << ',' << this->*field;
  os << ',' << std::setprecision(6) << std::fixed << early_reshuffle_pct;
  return os.str();
}

// --- run ---------------------------------------------------------------------------

RunResult run(const SimConfig& cfg, const std::vector<TraceOp>& trace, const std::vector<ScheduledFault>& faults,
              const std::vector<AttackSpec>& attacks) {
  const std::uint64_t capacity = cfg.oram.capacity_blocks();
  for (const auto& t : trace)
    if (t.addr >= capacity)
      throw ConfigError("trace address 0x" + [&] {
        std::ostringstream os;
        os << std::hex << t.addr;
        return os.str();
      }() + " exceeds the ORAM capacity of " + std::to_string(capacity) + " blocks");

  Controller c = cfg.dram ? Controller(cfg.oram, cfg.scheme, cfg.seed, *cfg.dram) : Controller(cfg.oram, cfg.scheme, cfg.seed);
  c.set_error_interval(cfg.error_interval);

  std::vector<ScheduledFault> pending(faults);
  std::stable_sort(pending.begin(), pending.end(), [](const auto& a, const auto& b) { return a.tick < b.tick; });
  std::size_t next_fault = 0;

  std::mt19937_64 attack_rng(detail::mix(cfg.seed, 0x61747461636bull));
  struct Armed {
    AttackSpec spec;
    std::uint64_t block = 0;
    Block576 captured;
    bool fired = false;
  };
  std::vector<Armed> armed;
  for (const auto& a : attacks) armed.push_back({a, 0, {}, false});
  auto pick_block = [&]() -> std::uint64_t {
    const auto written = c.written_buckets();
    if (written.empty()) return c.block_index(c.path_bucket(0, c.config().cached_levels), kSlotsPerBucket);
    return c.block_index(written[attack_rng() % written.size()], kSlotsPerBucket);
  };
  std::optional<AttackKind> last_attack;

  RunResult res;
  std::uint64_t violations_seen = 0;
  StatsReport attributed;
  auto attribute = [&] {
    const auto v = c.stats().violations;
    for (; violations_seen < v; ++violations_seen) {
      if (!last_attack) {
        ++attributed.detections_error;
        continue;
      }
      switch (*last_attack) {
        case AttackKind::tamper_bit: ++attributed.detections_tamper; break;
        case AttackKind::replay_block: ++attributed.detections_replay; break;
        case AttackKind::swap_blocks: ++attributed.detections_splice; break;
      }
    }
  };

  std::uint64_t i = 0;
  try {
    for (; i < trace.size(); ++i) {
      while (next_fault < pending.size() && pending[next_fault].tick <= c.now()) {
        const auto& r = pending[next_fault++].record;
        c.dram().inject_fault(r);
      }
      for (auto& a : armed) {
        if (a.fired) continue;
        if (a.spec.kind == AttackKind::replay_block && a.spec.capture_at == i) {
          a.block = a.spec.block ? *a.spec.block : pick_block();
          a.captured = c.dram().peek(a.block);
        }
        if (a.spec.at != i) continue;
        a.fired = true;
        bool changed = false;
        switch (a.spec.kind) {
          case AttackKind::tamper_bit: {
            const auto blk = a.spec.block ? *a.spec.block : pick_block();
            const auto bit = a.spec.bit ? *a.spec.bit : static_cast<std::uint32_t>(attack_rng() % kBlockBits);
            changed = tamper_bit(c.dram(), blk, bit);
            break;
          }
          case AttackKind::replay_block:
            changed = replay_block(c.dram(), a.block, a.captured);
            break;
          case AttackKind::swap_blocks: {
            const auto x = a.spec.block ? *a.spec.block : pick_block();
            const auto y = a.spec.other ? *a.spec.other : pick_block();
            changed = swap_blocks(c.dram(), x, y);
            break;
          }
        }
        if (changed) last_attack = a.spec.kind;
      }
      const auto& t = trace[i];
      if (t.op == Op::read) {
        c.read(t.addr);
      } else {
        c.write(t.addr, payload_for(t.addr, i));
      }
      attribute();
    }
  } catch (const IntegrityViolation& e) {
    res.exit_code = 2;
    res.message = e.what();
  } catch (const UnrecoverableFailure& e) {
    res.exit_code = 3;
    res.message = e.what();
  } catch (const ReliabilityAlarm& e) {
    res.exit_code = 3;
    res.message = e.what();
  }
  attribute();
  res.report = StatsReport::from(c);
  res.report.ops = i;
  res.remap_listing = c.remap_table().listing();
  res.report.detections_tamper = attributed.detections_tamper;
  res.report.detections_replay = attributed.detections_replay;
  res.report.detections_splice = attributed.detections_splice;
  res.report.detections_error = attributed.detections_error;
  if (res.exit_code == 2) res.report.outcome = "integrity_violation";
  if (res.exit_code == 3) res.report.outcome = "unrecoverable";
  return res;
}

}  // namespace iro

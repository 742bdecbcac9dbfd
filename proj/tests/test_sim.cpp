#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "iro/sim.hpp"
#include "oracles.hpp"

using namespace iro;

namespace {

std::string error_of(const std::string& text) {
  std::istringstream in(text);
  try {
    parse_trace(in);
  } catch (const ParseError& e) {
    return e.what();
  }
  return {};
}

SimConfig small_config(Scheme s) {
  std::istringstream in("tree_levels = 8\ncached_levels = 2\nseed = 4\n");
  SimConfig c = SimConfig::parse(in);
  c.scheme = s;
  return c;
}

}  // namespace

TEST_CASE("traces parse and round-trip") {
  std::istringstream in("# header\nR 0x10\n\nw ff  # trailing comment\nW 0\n");
  const auto t = parse_trace(in);
  REQUIRE(t.size() == 3);
  CHECK(t[0] == TraceOp{Op::read, 0x10});
  CHECK(t[1] == TraceOp{Op::write, 0xff});
  std::ostringstream out;
  write_trace(out, t);
  std::istringstream back(out.str());
  CHECK(parse_trace(back) == t);
}

TEST_CASE("trace errors name the line") {
  CHECK(error_of("R 1\nX 2\n").find("line 2") != std::string::npos);
  CHECK(error_of("R 1\nR 2\n\nR\n").find("line 4") != std::string::npos);
  CHECK(error_of("W zz\n").find("line 1") != std::string::npos);
  CHECK(error_of("R 1 2\n").find("trailing") != std::string::npos);
  CHECK(error_of("R 1\n").empty());
}

TEST_CASE("uniform traces are uniform") {
  const auto t = generate_trace(TraceKind::uniform, 200000, 64, 7);
  std::vector<std::uint64_t> counts(64);
  std::size_t writes = 0;
  for (const auto& op : t) {
    REQUIRE(op.addr < 64);
    ++counts[op.addr];
    writes += op.op == Op::write;
  }
  CHECK(oracle::chi_square_uniform_pvalue(counts) > 0.001);
  CHECK(static_cast<double>(writes) / 200000.0 == doctest::Approx(0.5).epsilon(0.02));
  CHECK(generate_trace(TraceKind::uniform, 100, 64, 7) == generate_trace(TraceKind::uniform, 100, 64, 7));
  CHECK(generate_trace(TraceKind::uniform, 100, 64, 7) != generate_trace(TraceKind::uniform, 100, 64, 8));
}

TEST_CASE("zipfian traces follow rank frequencies") {
  const std::uint64_t n = 400000, f = 100;
  const double s = 1.2;
  const auto t = generate_trace(TraceKind::zipfian, n, f, 3, s);
  std::vector<double> freq(f);
  for (const auto& op : t) freq[op.addr] += 1.0;
  double h = 0.0;
  for (std::uint64_t k = 1; k <= f; ++k) h += std::pow(static_cast<double>(k), -s);
  // Ranks are addresses: rank 1 is address 0.
  std::map<std::uint64_t, double> by_rank;
  for (std::uint64_t k : {1u, 2u, 5u, 10u}) {
    const double expect = std::pow(static_cast<double>(k), -s) / h;
    CHECK(freq[k - 1] / static_cast<double>(n) == doctest::Approx(expect).epsilon(0.05));
  }
}

TEST_CASE("synthetic specs") {
  auto s = SyntheticSpec::parse("zipfian,100,50,0.9");
  CHECK(s.kind == TraceKind::zipfian);
  CHECK(s.n == 100);
  CHECK(s.footprint == 50);
  CHECK(s.zipf_s == doctest::Approx(0.9));
  CHECK_THROWS_AS(SyntheticSpec::parse("normal,1,1"), ParseError);
  CHECK_THROWS_AS(SyntheticSpec::parse("uniform,1"), ParseError);
  CHECK_THROWS_AS(SyntheticSpec::parse("uniform,1,0"), ParseError);
}

TEST_CASE("config files") {
  std::istringstream in("# comment\nscheme = rimr\ntree_levels = 12\ncached_levels=4\nA = 3\nmust_levels = 3\n"
                        "must_leaf_span = 4\nmust_cached_levels = 1\ndram_rows = 512\n");
  const SimConfig c = SimConfig::parse(in);
  CHECK(c.scheme == Scheme::rimr);
  CHECK(c.oram.tree_levels == 12);
  CHECK(c.oram.cached_levels == 4);
  CHECK(c.oram.A == 3);
  REQUIRE(c.oram.must);
  CHECK(c.oram.must->tree_levels == 12);
  CHECK(c.oram.must->leaf_span == 4);
  REQUIRE(c.dram);
  CHECK(c.dram->rows == 512);

  std::istringstream bad("tree_levels = 8\nflux = 3\n");
  try {
    SimConfig::parse(bad);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::istringstream bad_value("A = three\n");
  CHECK_THROWS_AS(SimConfig::parse(bad_value), ConfigError);
}

TEST_CASE("reports round-trip through JSON and keep a fixed CSV shape") {
  const SimConfig cfg = small_config(Scheme::rim);
  const auto res = run(cfg, generate_trace(TraceKind::uniform, 400, 100, 1));
  CHECK(res.exit_code == 0);
  const auto j = res.report.to_json();
  CHECK(j.at("schema_version") == StatsReport::kSchemaVersion);
  const auto back = StatsReport::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.csv_row() == res.report.csv_row());

  const auto cols = [](const std::string& s) { return std::count(s.begin(), s.end(), ','); };
  CHECK(cols(StatsReport::csv_header()) == cols(res.report.csv_row()));
  const auto other = run(small_config(Scheme::baseline), {});
  CHECK(cols(other.report.csv_row()) == cols(res.report.csv_row()));

  auto broken = j;
  broken["schema_version"] = 99;
  CHECK_THROWS_AS(StatsReport::from_json(broken), ParseError);
  broken = j;
  broken["extra"] = 1;
  CHECK_THROWS_AS(StatsReport::from_json(broken), ParseError);
  broken = j;
  broken["ops"] = "many";
  CHECK_THROWS_AS(StatsReport::from_json(broken), ParseError);
}

TEST_CASE("runs are deterministic and match the checked-in report") {
  const std::string dir = IRO_GOLDEN_DIR;
  std::ifstream conf(dir + "/small.conf"), tr(dir + "/trace_small.txt"), rep(dir + "/report_rimr_small.json");
  REQUIRE(conf);
  REQUIRE(tr);
  REQUIRE(rep);
  const SimConfig cfg = SimConfig::parse(conf);
  const auto trace = parse_trace(tr);
  CHECK(trace == generate_trace(TraceKind::zipfian, 1000, 200, 2));
  const auto a = run(cfg, trace), b = run(cfg, trace);
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.report.to_json() == nlohmann::json::parse(rep));
}

TEST_CASE("an empty trace is a clean run") {
  const auto r = run(small_config(Scheme::ri), {});
  CHECK(r.exit_code == 0);
  CHECK(r.report.ops == 0);
  CHECK(r.report.outcome == "clean");
  CHECK(r.report.total_reads == 0);
}

TEST_CASE("addresses beyond capacity are a configuration error") {
  const SimConfig cfg = small_config(Scheme::ri);
  CHECK_THROWS_AS(run(cfg, {{Op::read, cfg.oram.capacity_blocks()}}), ConfigError);
}

TEST_CASE("attacks stop MAC schemes with exit code 2") {
  const auto trace = generate_trace(TraceKind::uniform, 3000, 300, 5);
  for (auto s : {Scheme::ri, Scheme::rim}) {
    INFO(to_string(s));
    const auto r = run(small_config(s), trace, {}, {AttackSpec::parse("tamper_bit:200")});
    CHECK(r.exit_code == 2);
    CHECK(r.report.outcome == "integrity_violation");
    CHECK(r.report.detections_tamper == 1);
    CHECK(r.report.ops < trace.size());
  }
  const auto replay = run(small_config(Scheme::ri), trace, {}, {AttackSpec::parse("replay_block:100:900")});
  CHECK(replay.exit_code == 2);
  CHECK(replay.report.detections_replay == 1);
  const auto splice = run(small_config(Scheme::rim), trace, {}, {AttackSpec::parse("swap_blocks:300")});
  CHECK(splice.exit_code == 2);
  CHECK(splice.report.detections_splice == 1);

  // Without MACs nothing is noticed.
  const auto base = run(small_config(Scheme::baseline), trace, {}, {AttackSpec::parse("tamper_bit:200")});
  CHECK(base.exit_code == 0);
}

TEST_CASE("attack specs") {
  const auto a = AttackSpec::parse("tamper_bit:5:100:7");
  CHECK(a.kind == AttackKind::tamper_bit);
  CHECK(a.at == 5);
  CHECK(a.block == 100u);
  CHECK(a.bit == 7u);
  CHECK_THROWS_AS(AttackSpec::parse("replay_block:9:3"), ParseError);
  CHECK_THROWS_AS(AttackSpec::parse("tamper_bit:1:1:576"), ParseError);
  CHECK_THROWS_AS(AttackSpec::parse("melt:1"), ParseError);
  Dram d(DramGeometry::fitting(16));
  CHECK(tamper_bit(d, 3, 0));
  CHECK_FALSE(swap_blocks(d, 5, 6));  // both zero
  CHECK(swap_blocks(d, 3, 6));
  CHECK_FALSE(replay_block(d, 6, d.peek(6)));
}

TEST_CASE("scheduled faults are injected at their tick") {
  SimConfig cfg = small_config(Scheme::rimr);
  const auto trace = generate_trace(TraceKind::uniform, 800, 300, 9);
  std::istringstream sched("1 permanent channel 1\n");
  const auto faults = parse_fault_schedule(sched);
  const auto r = run(cfg, trace, faults);
  CHECK(r.exit_code == 0);
  CHECK(r.report.recoveries_case3 == 1);
  CHECK(r.report.detections_error > 0);
}

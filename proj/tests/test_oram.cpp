#include <random>
#include <unordered_map>

#include "doctest.h"
#include "iro/oram.hpp"

using namespace iro;

namespace {

OramConfig small(std::uint32_t levels = 10, std::uint32_t cached = 3) {
  OramConfig c;
  c.tree_levels = levels;
  c.cached_levels = cached;
  return c;
}

const Scheme kAll[] = {Scheme::baseline, Scheme::ri, Scheme::rim, Scheme::rimr, Scheme::rimre};

Data pattern(std::uint64_t a, std::uint64_t i) {
  Data d{};
  d[0] = a;
  d[1] = i;
  d[7] = a * 0x9e3779b97f4a7c15ull ^ i;
  return d;
}

// Random reads and writes checked against a flat map.
void run_against_shadow(Controller& c, std::uint64_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::unordered_map<std::uint64_t, Data> shadow;
  const std::uint64_t cap = c.config().capacity_blocks();
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t a = rng() % cap;
    if (rng() & 1) {
      const Data d = pattern(a, i);
      c.write(a, d);
      shadow[a] = d;
    } else {
      const auto it = shadow.find(a);
      REQUIRE(c.read(a) == (it == shadow.end() ? Data{} : it->second));
    }
  }
}

}  // namespace

TEST_CASE("scheme names round-trip") {
  for (auto s : kAll) CHECK(parse_scheme(to_string(s)) == s);
  CHECK_THROWS(parse_scheme("ring"));
  CHECK(SchemeFeatures::of(Scheme::rim).must);
  CHECK_FALSE(SchemeFeatures::of(Scheme::rim).replication);
  CHECK(SchemeFeatures::of(Scheme::rimre).random_errors);
}

TEST_CASE("Read Path block counts on the default tree") {
  const OramConfig cfg;
  struct Want {
    Scheme s;
    std::uint64_t reads, writes;
  };
  for (auto w : {Want{Scheme::baseline, 32, 16}, Want{Scheme::ri, 32, 16}, Want{Scheme::rim, 35, 3},
                 Want{Scheme::rimr, 35, 6}}) {
    Controller c(cfg, w.s, 1);
    for (int i = 0; i < 10; ++i) {
      const OpCounts before = c.stats().phase[static_cast<int>(Phase::read_path)];
      c.read(static_cast<std::uint64_t>(i) * 977);
      const OpCounts d = c.stats().phase[static_cast<int>(Phase::read_path)] - before;
      INFO(to_string(w.s));
      REQUIRE(d.total_reads() == w.reads);
      REQUIRE(d.total_writes() == w.writes);
      REQUIRE(d.reads[static_cast<int>(BlockKind::data)] == 16);
    }
  }
}

TEST_CASE("every scheme returns what was last written") {
  for (auto s : kAll) {
    INFO(to_string(s));
    Controller c(small(), s, 11);
    if (s == Scheme::rimre) c.set_error_interval(20000);
    run_against_shadow(c, 6000, 3);
    std::string why;
    CHECK_MESSAGE(c.check_path_invariant(&why), why);
    if (c.features().replication) {
      CHECK_MESSAGE(c.check_channel_disjointness(&why), why);
      CHECK_MESSAGE(c.check_mirror_equality(&why), why);
    }
    CHECK(c.stats().fallback_reads == 0);
    if (s == Scheme::rimre) {
      // Injected errors show up as MAC mismatches that recovery repairs.
      CHECK(c.stats().injected_errors > 0);
      CHECK(c.stats().violations > 0);
    } else {
      CHECK(c.stats().violations == 0);
    }
  }
}

TEST_CASE("identical seeds give identical DRAM images") {
  Controller a(small(8, 2), Scheme::rimr, 5), b(small(8, 2), Scheme::rimr, 5);
  run_against_shadow(a, 2000, 9);
  run_against_shadow(b, 2000, 9);
  CHECK(a.dram().contents() == b.dram().contents());
  CHECK(a.stats().total == b.stats().total);
  Controller c(small(8, 2), Scheme::rimr, 6);
  run_against_shadow(c, 2000, 9);
  CHECK(a.dram().contents() != c.dram().contents());
}

TEST_CASE("schemes share their access sequence for a given seed") {
  std::vector<ControllerStats> st;
  for (auto s : {Scheme::baseline, Scheme::ri, Scheme::rim, Scheme::rimr}) {
    Controller c(small(), s, 21);
    run_against_shadow(c, 3000, 4);
    st.push_back(c.stats());
  }
  for (const auto& s : st) {
    CHECK(s.read_paths == st[0].read_paths);
    CHECK(s.early_reshuffles == st[0].early_reshuffles);
    CHECK(s.stash_peak == st[0].stash_peak);
    CHECK(s.evictions == st[0].evictions);
  }
}

TEST_CASE("MUST schemes trade metadata writes for MUST traffic") {
  Controller ri(small(12, 4), Scheme::ri, 2), rim(small(12, 4), Scheme::rim, 2);
  run_against_shadow(ri, 3000, 1);
  run_against_shadow(rim, 3000, 1);
  CHECK(rim.stats().total.total_writes() < ri.stats().total.total_writes());
  CHECK(rim.stats().total.total_reads() > ri.stats().total.total_reads());
  CHECK(ri.stats().total.reads[static_cast<int>(BlockKind::must)] == 0);
}

TEST_CASE("stash pressure triggers dummy accesses") {
  OramConfig cfg = small(8, 2);
  cfg.stash_capacity = 40;
  cfg.stash_high = 0.5;
  cfg.stash_low = 0.25;
  Controller c(cfg, Scheme::ri, 3);
  run_against_shadow(c, 4000, 2);
  CHECK(c.stats().dummy_accesses > 0);
  CHECK(c.stash_size() <= 40);
}

TEST_CASE("eviction follows the bit-reversed leaf order") {
  Controller c(small(5, 1), Scheme::ri, 1);
  CHECK(c.eviction_leaf(0) == 0);
  CHECK(c.eviction_leaf(1) == 8);
  CHECK(c.eviction_leaf(2) == 4);
  CHECK(c.eviction_leaf(3) == 12);
  CHECK(c.eviction_leaf(16) == 0);
  CHECK(c.path_bucket(0, 0) == 0);
  CHECK(c.path_bucket(15, 4) == 30);
  CHECK(c.bucket_level(30) == 4);
}

TEST_CASE("tampered metadata is detected in ri and rim, recovered in rimr") {
  for (auto s : {Scheme::ri, Scheme::rim, Scheme::rimr}) {
    INFO(to_string(s));
    Controller c(small(), s, 8);
    run_against_shadow(c, 500, 6);
    c.write(42, pattern(42, 0));
    c.read(42);
    const auto leaf = c.leaf_of(42);
    REQUIRE(leaf);
    const std::uint64_t bucket = c.path_bucket(*leaf, c.config().cached_levels);
    REQUIRE(c.peek_metadata(bucket));
    c.dram().poke(c.block_index(bucket, 12), [&] {
      Block576 b = c.dram().peek(c.block_index(bucket, 12));
      b.flip_bit(200);
      return b;
    }());
    if (s == Scheme::rimr) {
      CHECK(c.read(42) == pattern(42, 0));
      CHECK(c.stats().recoveries[2] >= 1);
    } else {
      CHECK_THROWS_AS(c.read(42), IntegrityViolation);
      CHECK(c.violations().size() == 1);
    }
  }
}

TEST_CASE("baseline has no integrity check") {
  Controller c(small(), Scheme::baseline, 8);
  run_against_shadow(c, 500, 6);
  const auto leaf = c.leaf_of(0).value_or(0);
  const std::uint64_t bucket = c.path_bucket(leaf, c.config().cached_levels);
  Block576 b = c.dram().peek(c.block_index(bucket, 12));
  b.flip_bit(500);  // a child MAC field, unused here
  c.dram().poke(c.block_index(bucket, 12), b);
  CHECK_NOTHROW(c.read(0));
}

TEST_CASE("configuration checks") {
  OramConfig c;
  c.cached_levels = 23;
  CHECK_THROWS(c.validate());
  c = OramConfig{};
  c.Z = 4;
  CHECK_THROWS(c.validate());
  c = OramConfig{};
  CHECK(c.capacity_blocks() == static_cast<std::uint64_t>(0.8 * 5 * static_cast<double>(c.bucket_count())));
  CHECK(fit_must_geometry(23, 7).must_levels == 5);
  DramGeometry tiny;
  tiny.rows = 1;
  CHECK_THROWS_AS(Controller(small(), Scheme::ri, 1, tiny), CapacityError);
}

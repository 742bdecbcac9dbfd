#include <algorithm>
#include <random>
#include <set>
#include <unordered_map>

#include "doctest.h"
#include "iro/oram.hpp"
#include "oracles.hpp"

using namespace iro;

namespace {

OramConfig small(std::uint32_t levels = 8, std::uint32_t cached = 2) {
  OramConfig c;
  c.tree_levels = levels;
  c.cached_levels = cached;
  return c;
}

Data pattern(std::uint64_t a, std::uint64_t i) {
  Data d{};
  d[0] = a + 1;
  d[3] = i;
  return d;
}

// Writes every address once, then mixes random reads and writes.
Controller warmed(Scheme s, std::uint64_t seed, std::uint64_t ops = 1500, const OramConfig& cfg = small()) {
  Controller c(cfg, s, seed);
  std::mt19937_64 rng(seed);
  const std::uint64_t cap = std::min<std::uint64_t>(cfg.capacity_blocks(), 400);
  for (std::uint64_t a = 0; a < cap; ++a) c.write(a, pattern(a, 0));
  for (std::uint64_t i = 0; i < ops; ++i) {
    const std::uint64_t a = rng() % cap;
    if (rng() & 1)
      c.write(a, pattern(a, i + 1));
    else
      c.read(a);
  }
  return c;
}

// The DRAM-level bucket of `addr`'s current path at depth `level`.
std::uint64_t path_bucket_of(const Controller& c, std::uint64_t addr, std::uint32_t level) {
  return c.path_bucket(*c.leaf_of(addr), level);
}

// Runs the access on a copy and reports which slot of `bucket` the Read Path
// fetched first.
std::uint32_t slot_read_next(const Controller& c, std::uint64_t bucket, std::uint64_t addr) {
  Controller probe = c;
  for (std::uint32_t k = 0; k < kSlotsPerBucket; ++k) probe.dram().watch(probe.block_index(bucket, k));
  probe.read(addr);
  REQUIRE_FALSE(probe.dram().watched_hits().empty());
  return static_cast<std::uint32_t>(probe.dram().watched_hits().front() % kBlocksPerBucket);
}

void flip(Dram& d, std::uint64_t index, std::initializer_list<std::uint32_t> bits) {
  Block576 b = d.peek(index);
  for (auto x : bits) b.flip_bit(x);
  d.poke(index, b);
}

std::vector<std::uint64_t> diff(const Controller& a, const Controller& b) {
  return oracle::image_diff(a.dram(), b.dram(), 0, a.layout().probe_base);
}

}  // namespace

TEST_CASE("Case 1: a corrupted data slot is rebuilt from its replica") {
  Controller a = warmed(Scheme::rimr, 1);
  Controller shadow = a;
  const std::uint64_t addr = 17;
  const std::uint64_t bucket = path_bucket_of(a, addr, a.config().cached_levels + 2);
  const std::uint32_t slot = slot_read_next(a, bucket, addr);
  flip(a.dram(), a.block_index(bucket, slot), {7, 300, 511});

  CHECK(a.read(addr) == shadow.read(addr));
  CHECK(a.stats().recoveries[1] == shadow.stats().recoveries[1] + 1);
  CHECK(a.stats().transient_faults == shadow.stats().transient_faults + 1);
  CHECK(diff(a, shadow).empty());
  CHECK(a.stats().phase[static_cast<int>(Phase::recovery)].total_reads() >= 6);
}

TEST_CASE("Case 1 over-reads the same six blocks whichever slot failed") {
  Controller base = warmed(Scheme::rimr, 2);
  const std::uint64_t addr = 5;
  const std::uint64_t bucket = path_bucket_of(base, addr, base.config().cached_levels + 1);
  const std::uint32_t slot = slot_read_next(base, bucket, addr);
  Controller a = base;
  flip(a.dram(), a.block_index(bucket, slot), {100});
  a.dram().enable_log(true);
  a.read(addr);
  std::set<std::uint64_t> over_read;
  const auto opposite = channel_slots(bucket, 1 - slot_channel(bucket, static_cast<std::int32_t>(slot)));
  for (auto s : opposite) over_read.insert(a.block_index(bucket, s));
  std::size_t hits = 0;
  for (const auto& r : a.dram().log())
    if (!r.write && over_read.count(r.index)) ++hits;
  CHECK(hits >= 6);
}

TEST_CASE("Case 2: corrupted metadata is rebuilt from replicas") {
  for (std::uint32_t extra = 0; extra < 4; ++extra) {
    Controller a = warmed(Scheme::rimr, 3 + extra);
    Controller shadow = a;
    const std::uint64_t addr = 30 + extra;
    const std::uint64_t bucket = path_bucket_of(a, addr, a.config().cached_levels + extra);
    flip(a.dram(), a.block_index(bucket, 12), {2, 90, 420, 575});
    CHECK(a.read(addr) == shadow.read(addr));
    CHECK(a.stats().recoveries[2] == shadow.stats().recoveries[2] + 1);
    CHECK(diff(a, shadow).empty());
  }
}

TEST_CASE("MUST node corruption is repaired from the mirror") {
  Controller a = warmed(Scheme::rimr, 9);
  Controller shadow = a;
  const std::uint64_t addr = 11;
  const auto path = pmeta_to_must_path(a.must_geometry(), *a.leaf_of(addr));
  const auto& step = path.steps.back();
  // Only one copy is read per access, so corrupt both and expect one repair.
  flip(a.dram(), a.must_block_index(step.node_id, false), {33});
  flip(a.dram(), a.must_block_index(step.node_id, true), {33});
  CHECK_THROWS_AS(a.read(addr), IntegrityViolation);

  Controller b = shadow;
  flip(b.dram(), b.must_block_index(step.node_id, false), {33});
  Controller c = shadow;
  flip(c.dram(), c.must_block_index(step.node_id, true), {33});
  // Exactly one of the two copies is on this access's read list.
  const Data want = shadow.read(addr);
  CHECK(b.read(addr) == want);
  CHECK(c.read(addr) == want);
  CHECK(b.stats().recoveries[4] + c.stats().recoveries[4] == 1);
  CHECK(diff(b, shadow).empty());
  CHECK(diff(c, shadow).empty());
  std::string why;
  CHECK_MESSAGE(b.check_mirror_equality(&why), why);
}

TEST_CASE("Case 3: a failed channel is rebuilt from the other") {
  for (std::uint32_t ch = 0; ch < 2; ++ch) {
    Controller a = warmed(Scheme::rimr, 12 + ch);
    Controller shadow = a;
    a.dram().fail_channel(ch);
    CHECK(a.read(3) == shadow.read(3));
    CHECK(a.stats().recoveries[3] == 1);
    CHECK_FALSE(a.dram().channel_failed(ch));
    CHECK(diff(a, shadow).empty());
    std::string why;
    CHECK_MESSAGE(a.check_mirror_equality(&why), why);
    CHECK_MESSAGE(a.check_channel_disjointness(&why), why);
  }
}

TEST_CASE("a rebuild of a healthy channel changes nothing") {
  Controller a = warmed(Scheme::rimr, 21);
  const Controller before = a;
  a.recover_channel(1);
  CHECK(diff(a, before).empty());
  a.recover_channel(1);
  CHECK(diff(a, before).empty());
  CHECK(a.read(8) == Controller(before).read(8));
}

TEST_CASE("failures at random write counts are absorbed") {
  std::mt19937_64 rng(77);
  const Controller base = warmed(Scheme::rimr, 30, 500);
  for (int trial = 0; trial < 10; ++trial) {
    Controller a = base, shadow = base;
    const std::uint32_t ch = static_cast<std::uint32_t>(rng() & 1);
    a.dram().fail_channel_after_writes(ch, 1 + rng() % 400);
    std::mt19937_64 ops(trial);
    for (int i = 0; i < 40; ++i) {
      const std::uint64_t addr = ops() % 400;
      if (ops() & 1) {
        const Data d = pattern(addr, 10000 + static_cast<std::uint64_t>(i));
        a.write(addr, d);
        shadow.write(addr, d);
      } else {
        REQUIRE(a.read(addr) == shadow.read(addr));
      }
    }
    // The failure may land on a channel nothing reads afterwards.
    if (a.dram().channel_failed(ch)) a.recover_channel(ch);
    CHECK(diff(a, shadow).empty());
  }
}

TEST_CASE("both channels failed is unrecoverable") {
  Controller a = warmed(Scheme::rimr, 40, 200);
  a.dram().fail_channel(0);
  a.dram().fail_channel(1);
  CHECK_THROWS_AS(a.read(1), UnrecoverableFailure);
}

TEST_CASE("a stuck cell is classified permanent and covered by an ECP") {
  Controller a = warmed(Scheme::rimr, 50);
  Controller shadow = a;
  const std::uint64_t addr = 9;
  const std::uint64_t bucket = path_bucket_of(a, addr, a.config().cached_levels);
  const std::uint64_t meta = a.block_index(bucket, 12);
  FaultRecord r;
  r.kind = FaultKind::permanent;
  r.location = map_address(meta, a.dram().geometry());
  r.bit = 300;
  r.stuck_value = !a.dram().peek(meta).bit(300);
  a.dram().inject_fault(r);
  CHECK(a.read(addr) == shadow.read(addr));
  CHECK(a.stats().permanent_faults == shadow.stats().permanent_faults + 1);
  // The next rewrite of the bucket records the fault.
  std::mt19937_64 rng(1);
  for (int i = 0; i < 300 && a.stats().ecp_allocations == 0; ++i) {
    const std::uint64_t x = rng() % 400;
    REQUIRE(a.read(x) == shadow.read(x));
  }
  CHECK(a.stats().ecp_allocations >= 1);
  const auto m = a.peek_metadata(bucket);
  REQUIRE(m);
  const auto entries = read_ecps(a.dram().peek(meta), EcpLayout::bucket());
  CHECK(recorded_faults(entries) == std::vector<std::uint32_t>{bucket_bit_address(-1, 300)});
  for (std::uint64_t x = 0; x < 400; x += 7) REQUIRE(a.read(x) == shadow.read(x));
}

TEST_CASE("random errors cost under one percent extra traffic") {
  const OramConfig cfg = small(12, 4);
  Controller r(cfg, Scheme::rimr, 3), re(cfg, Scheme::rimre, 3);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20000; ++i) {
    const std::uint64_t a = rng() % 5000;
    if (rng() & 1) {
      r.write(a, pattern(a, static_cast<std::uint64_t>(i)));
      re.write(a, pattern(a, static_cast<std::uint64_t>(i)));
    } else {
      REQUIRE(r.read(a) == re.read(a));
    }
  }
  CHECK(re.stats().injected_errors > 0);
  const auto base = static_cast<double>(r.stats().total.total_reads() + r.stats().total.total_writes());
  const auto with = static_cast<double>(re.stats().total.total_reads() + re.stats().total.total_writes());
  CHECK((with - base) / base < 0.01);
}

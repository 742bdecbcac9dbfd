#include <random>
#include <set>

#include "doctest.h"
#include "iro/ecp.hpp"

using namespace iro;

namespace {

Block576 random_block(std::mt19937_64& rng) {
  Block576 b;
  for (std::size_t w = 0; w < Block576::kWords; ++w) b.set_word(w, rng());
  return b;
}

// Stuck-at faults: each faulty cell reads the complement of what was written.
Block576 corrupt(Block576 b, const std::vector<std::uint32_t>& faults) {
  for (auto a : faults)
    if (a < kBlockBits) b.flip_bit(a);
  return b;
}

void check_repairs(const EcpLayout& l, std::mt19937_64& rng, std::size_t n_region, std::size_t n_other) {
  std::set<std::uint32_t> fs;
  while (fs.size() < n_region)
    fs.insert(static_cast<std::uint32_t>(l.region_offset + rng() % (l.entry_count * l.entry_bits)));
  while (fs.size() < n_region + n_other) fs.insert(static_cast<std::uint32_t>(l.region_end() + rng() % (kBlockBits - l.region_end())));
  const std::vector<std::uint32_t> faults(fs.begin(), fs.end());
  const auto plan = allocate_ecp(l, faults, rng() % l.entry_count);
  REQUIRE(plan.has_value());
  Block576 host = random_block(rng);
  embed_ecps(host, l, *plan);
  const Block576 repaired = repair_host(corrupt(host, faults), l);
  REQUIRE(repaired == host);
}

}  // namespace

TEST_CASE("ECP entries encode and decode") {
  const auto b = EcpLayout::bucket();
  EcpEntry e{7000, true, true};
  CHECK(decode_ecp_entry(b, encode_ecp_entry(b, e)) == e);
  CHECK_FALSE(decode_ecp_entry(b, encode_ecp_entry(b, EcpEntry{})).in_use);
  CHECK_FALSE(decode_ecp_entry(b, 0x1fff).in_use);  // beyond 13 x 576
  const auto m = EcpLayout::must_leaf();
  CHECK(encode_ecp_entry(m, EcpEntry{}) == 0);
  EcpEntry f{575, false, true};
  CHECK(decode_ecp_entry(m, encode_ecp_entry(m, f)) == f);
  CHECK(b.region_end() == 74);
  CHECK(EcpLayout::must_non_leaf().region_end() == 39);
  CHECK(m.region_end() == 88);
}

TEST_CASE("no faults leaves the host untouched") {
  std::mt19937_64 rng(3);
  for (const auto& l : {EcpLayout::bucket(), EcpLayout::must_non_leaf(), EcpLayout::must_leaf()}) {
    auto plan = allocate_ecp(l, {});
    REQUIRE(plan);
    CHECK(plan->used() == 0);
    Block576 h = random_block(rng);
    embed_ecps(h, l, *plan);
    CHECK_FALSE(h.bit(0));
    CHECK(repair_host(h, l) == h);
  }
}

TEST_CASE("a single fault anywhere past the header is repaired") {
  std::mt19937_64 rng(5);
  const auto l = EcpLayout::bucket();
  for (std::uint32_t a = 4; a < kBlockBits; ++a) {
    auto plan = allocate_ecp(l, {a});
    REQUIRE(plan);
    Block576 h = random_block(rng);
    embed_ecps(h, l, *plan);
    CHECK(h.bit(0));
    REQUIRE(repair_host(corrupt(h, {a}), l) == h);
  }
  CHECK_FALSE(allocate_ecp(l, {2}));  // header bits are not repairable
}

TEST_CASE("any four faults inside the bucket ECP region are repaired") {
  std::mt19937_64 rng(7);
  const auto l = EcpLayout::bucket();
  for (int i = 0; i < 20000; ++i) check_repairs(l, rng, 4, 0);
  for (int i = 0; i < 5000; ++i) check_repairs(l, rng, 2, 3);
  for (int i = 0; i < 5000; ++i) check_repairs(l, rng, 0, 5);
}

TEST_CASE("MUST node layouts repair up to their entry counts") {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 5000; ++i) {
    check_repairs(EcpLayout::must_non_leaf(), rng, 2, 0);
    check_repairs(EcpLayout::must_non_leaf(), rng, 1, 2);
    check_repairs(EcpLayout::must_leaf(), rng, 6, 0);
    check_repairs(EcpLayout::must_leaf(), rng, 3, 4);
  }
}

TEST_CASE("one fault per entry exceeds capacity") {
  const auto l = EcpLayout::bucket();
  std::vector<std::uint32_t> f;
  for (std::size_t e = 0; e < 5; ++e) f.push_back(static_cast<std::uint32_t>(4 + e * 14));
  CHECK_FALSE(allocate_ecp(l, f));
  f.pop_back();
  CHECK(allocate_ecp(l, f));
  std::vector<std::uint32_t> six{100, 200, 300, 400, 500, 550};
  CHECK_FALSE(allocate_ecp(l, six));
}

TEST_CASE("rotation prefers the requested offset") {
  const auto l = EcpLayout::bucket();
  auto p = allocate_ecp(l, {300}, 3);
  REQUIRE(p);
  CHECK(p->roffset == 3);
  // A fault in physical entry 3 cannot sit under logical entry 0.
  p = allocate_ecp(l, {4 + 3 * 14 + 2}, 3);
  REQUIRE(p);
  CHECK(p->roffset != 3);
}

TEST_CASE("external targets take their value from the caller") {
  const auto l = EcpLayout::bucket();
  const std::uint32_t addr = bucket_bit_address(4, 17);
  CHECK(bucket_address_slot(addr) == 4);
  auto plan = allocate_ecp(l, {addr});
  REQUIRE(plan);
  Block576 h;
  CHECK_THROWS_AS(embed_ecps(h, l, *plan), std::logic_error);
  embed_ecps(h, l, *plan, [&](std::uint32_t a) { return a == addr; });
  const auto entries = read_ecps(h, l);
  CHECK(recorded_faults(entries) == std::vector<std::uint32_t>{addr});
  Block576 slot;
  const Block576 fixed = apply_ecps(slot, entries, bucket_bit_address(4, 0));
  CHECK(fixed.bit(17));
  CHECK(fixed.popcount() == 1);
  CHECK(apply_ecps(slot, entries, bucket_bit_address(3, 0)).is_zero());
}

TEST_CASE("mirrored allocation covers the union") {
  const auto l = EcpLayout::must_leaf();
  const std::vector<std::uint32_t> a{100, 200}, b{200, 300};
  auto p = allocate_ecp_mirrored(l, a, b);
  REQUIRE(p);
  CHECK(p->used() == 3);
  for (auto x : {100u, 200u, 300u}) CHECK(p->covers(x));
}

TEST_CASE("fault classification by flipped cell count") {
  std::mt19937_64 rng(1);
  const Block576 w = random_block(rng);
  CHECK(classify_fault(w, w) == FaultClass::transient);
  Block576 r = w;
  for (std::uint32_t i = 0; i < 8; ++i) r.flip_bit(i * 70);
  CHECK(classify_fault(w, r) == FaultClass::permanent);
  CHECK(differing_bits(w, r).size() == 8);
  r.flip_bit(575);
  CHECK(classify_fault(w, r) == FaultClass::device);
}

TEST_CASE("remap table hands out spares until full") {
  RemapTable t(3);
  CHECK(t.remap(10) == 0);
  CHECK(t.remap(20) == 1);
  CHECK(t.remap(10) == 0);
  CHECK(t.lookup(20) == 1u);
  CHECK_FALSE(t.lookup(30));
  CHECK(t.remap(30) == 2);
  CHECK_THROWS_AS(t.remap(40), ReliabilityAlarm);
  CHECK(t.listing() == "# bucket spare\n10 0\n20 1\n30 2\n");
  // Default sizing for a 23-level tree fits in 8 KB.
  CHECK(RemapTable{}.encoded_bytes(23) <= 8192);
}

#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "iro/codec.hpp"

using namespace iro;

namespace {

struct Width {
  const char* name;
  std::size_t width;
  std::size_t repeat;
};

// Offsets rebuilt from field widths alone, packed LSB-first in declaration order.
std::vector<std::pair<std::string, std::size_t>> packed(const std::vector<Width>& ws, std::size_t& total) {
  std::vector<std::pair<std::string, std::size_t>> out;
  total = 0;
  for (const auto& w : ws)
    for (std::size_t i = 0; i < w.repeat; ++i) {
      out.emplace_back(w.name, total);
      total += w.width;
    }
  return out;
}

void check_against(const std::vector<layout::Field>& fields, const std::vector<Width>& ws, std::size_t expect_total) {
  std::size_t total = 0;
  const auto oracle = packed(ws, total);
  CHECK(total == expect_total);
  REQUIRE(fields.size() == oracle.size());
  for (std::size_t i = 0; i < fields.size(); ++i) {
    INFO(fields[i].name);
    CHECK(fields[i].name.rfind(oracle[i].first, 0) == 0);
    CHECK(fields[i].offset == oracle[i].second);
  }
}

std::mt19937_64 rng(31);
std::uint64_t draw(std::size_t width) { return width >= 64 ? rng() : rng() & ((1ull << width) - 1); }

BucketMetadata random_metadata() {
  BucketMetadata m;
  m.fbit = draw(1);
  m.roffset = static_cast<std::uint8_t>(draw(3));
  for (auto& e : m.ecps) e = static_cast<std::uint16_t>(draw(14));
  for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
    m.addresses[i] = static_cast<std::uint32_t>(draw(32));
    m.path_labels[i] = static_cast<std::uint32_t>(draw(30));
    m.real_offsets[i] = static_cast<std::uint8_t>(draw(4));
  }
  m.replica_meta_offset = static_cast<std::uint8_t>(draw(4));
  m.enc_ctr.value = draw(60);
  for (auto& t : m.child_macs) t.value = draw(54);
  return m;
}

VRSet random_vr() { return VRSet::decode(static_cast<std::uint16_t>(draw(15))); }

}  // namespace

TEST_CASE("layouts pack their fields without gaps") {
  check_against(layout::bucket_metadata(),
                {{"fbit", 1, 1}, {"roffset", 3, 1}, {"ecp", 14, 5}, {"address", 32, 5}, {"path_label", 30, 5},
                 {"real_offset", 4, 5}, {"replica_meta_offset", 4, 1}, {"enc_ctr", 60, 1}, {"child_mac", 54, 2}},
                576);
  check_against(layout::must_non_leaf(),
                {{"fbit", 1, 1}, {"roffset", 2, 1}, {"ecp", 12, 3}, {"vr", 15, 7}, {"child_mac", 54, 8}}, 576);
  for (std::size_t k : {0u, 3u, 4u, 7u}) {
    std::vector<Width> ws{{"fbit", 1, 1}, {"roffset", 3, 1}, {"ecp", 12, 7}, {"vr", 15, 31}, {"ipoffset", 3, k}};
    if (553 + 3 * k < 576) ws.push_back({"padding", 576 - 553 - 3 * k, 1});
    check_against(layout::must_leaf(k), ws, 576);
  }
  check_against(layout::data_slot(), {{"ciphertext", 512, 1}, {"ecc.mac", 54, 1}, {"ecc.partial", 10, 1}}, 576);
  check_against(layout::replica_metadata(),
                {{"fbit", 1, 1}, {"roffset", 3, 1}, {"ecp", 14, 5}, {"address", 32, 5}, {"path_label", 30, 5},
                 {"real_offset", 4, 5}, {"child_mac", 54, 2}, {"ecc.mac", 54, 1}, {"ecc.partial", 10, 1}},
                576);
  CHECK(layout::kMaxIpOffsets == 7);
}

TEST_CASE("bucket metadata round-trips") {
  for (int i = 0; i < 500; ++i) {
    const BucketMetadata m = random_metadata();
    const Block576 b = encode_bucket_metadata(m);
    REQUIRE(decode_bucket_metadata(b) == m);
    REQUIRE(encode_bucket_metadata(decode_bucket_metadata(b)) == b);
  }
  BucketMetadata bad;
  bad.roffset = 8;
  CHECK_THROWS_AS(encode_bucket_metadata(bad), std::invalid_argument);
  bad = BucketMetadata{};
  bad.path_labels[2] = 1u << 30;
  CHECK_THROWS_AS(encode_bucket_metadata(bad), std::invalid_argument);
}

TEST_CASE("replica metadata keeps everything but the counter and replica offset") {
  for (int i = 0; i < 200; ++i) {
    const BucketMetadata m = random_metadata();
    const Block576 r = encode_replica_metadata(m);
    CHECK(r.ecc_area() == 0);
    REQUIRE(decode_replica_metadata(r, m.enc_ctr, m.replica_meta_offset) == m);
  }
}

TEST_CASE("MUST nodes round-trip") {
  for (int i = 0; i < 200; ++i) {
    MustNodeNonLeaf n;
    n.fbit = draw(1);
    n.roffset = static_cast<std::uint8_t>(draw(2));
    for (auto& e : n.ecps) e = static_cast<std::uint16_t>(draw(12));
    for (auto& v : n.vr) v = random_vr();
    for (auto& t : n.child_macs) t.value = draw(54);
    REQUIRE(decode_must_non_leaf(encode_must_node(n)) == n);

    MustNodeLeaf l;
    l.fbit = draw(1);
    l.roffset = static_cast<std::uint8_t>(draw(3));
    for (auto& e : l.ecps) e = static_cast<std::uint16_t>(draw(12));
    for (auto& v : l.vr) v = random_vr();
    l.ipoffsets.resize(rng() % 8);
    for (auto& o : l.ipoffsets) o = static_cast<std::uint8_t>(draw(3));
    const Block576 b = encode_must_node(l);
    REQUIRE(decode_must_leaf(b, l.ipoffsets.size()) == l);
    if (l.ipoffsets.size() < 7) CHECK(b.get(553 + 3 * l.ipoffsets.size(), 576 - 553 - 3 * l.ipoffsets.size()) == 0);
  }
  MustNodeLeaf l;
  l.ipoffsets.assign(8, 0);
  CHECK_THROWS_AS(encode_must_node(l), std::invalid_argument);
  CHECK_THROWS_AS(decode_must_leaf(Block576{}, 8), std::invalid_argument);
}

TEST_CASE("VR sets store consumed slots so zero means fresh") {
  CHECK(VRSet::fresh().encode() == 0);
  CHECK(VRSet::decode(0) == VRSet::fresh());
  VRSet v;
  v.consume(3);
  v.consume(11);
  CHECK(v.encode() == ((1u << 3) | (1u << 11) | (2u << 12)));
  CHECK_FALSE(v.is_valid(3));
  CHECK(v.is_valid(4));
  for (std::uint16_t x = 0; x < (1u << 15); x += 7) REQUIRE(VRSet::decode(x).encode() == x);

  Block576 m;
  put_inline_vrset(m, v);
  CHECK(get_inline_vrset(m) == v);
  CHECK(m.get(4, 15) == v.encode());
  CHECK(m.get(19, 64) == 0);
}

TEST_CASE("ECC area packs the tag low and the partial counter high") {
  const std::uint64_t e = pack_ecc_area(Mac54{0x2aaaaaaaaaaaaa}, 0x3ff);
  CHECK((e & kMacMask) == 0x2aaaaaaaaaaaaa);
  CHECK((e >> 54) == 0x3ff);
  const EccArea a = unpack_ecc_area(e);
  CHECK(a.mac.value == 0x2aaaaaaaaaaaaa);
  CHECK(a.partial_ctr == 0x3ff);
  CHECK((pack_ecc_area(Mac54{1}, 0x400) >> 54) == 0);
}

TEST_CASE("layout manifest matches the checked-in fixture") {
  std::ifstream in(std::string(IRO_GOLDEN_DIR) + "/layout_manifest.txt");
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(layout::manifest(4) == ss.str());
}

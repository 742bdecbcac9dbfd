#include "iro/codec.hpp"

#include <sstream>
#include <stdexcept>

namespace iro {

using namespace layout;

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("codec: field out of range: ") + what);
}

bool fits(std::uint64_t v, std::size_t width) { return width >= 64 || v < (std::uint64_t{1} << width); }

}  // namespace

std::uint16_t VRSet::encode() const {
  return static_cast<std::uint16_t>((~valid & 0xfffu) | (std::uint32_t{read_ctr} & 7u) << 12);
}

VRSet VRSet::decode(std::uint16_t bits15) {
  VRSet v;
  v.valid = static_cast<std::uint16_t>(~bits15 & 0xfffu);
  v.read_ctr = static_cast<std::uint8_t>((bits15 >> 12) & 7u);
  return v;
}

BucketMetadata BucketMetadata::empty() {
  BucketMetadata m;
  m.addresses.fill(kEmptyAddress);
  return m;
}

Block576 encode_bucket_metadata(const BucketMetadata& m) {
  Block576 b;
  require(fits(m.roffset, kRoffsetBits), "roffset");
  require(fits(m.replica_meta_offset, kOffsetBits), "replica_meta_offset");
  require(fits(m.enc_ctr.value, kEncCtrBits), "enc_ctr");
  b.put(kFbit, 1, m.fbit);
  b.put(kRoffset, kRoffsetBits, m.roffset);
  for (std::size_t i = 0; i < kEcpCount; ++i) {
    require(fits(m.ecps[i], kEcpBits), "ecp");
    b.put(kEcps + i * kEcpBits, kEcpBits, m.ecps[i]);
  }
  for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
    require(fits(m.path_labels[i], kLabelBits), "path_label");
    require(fits(m.real_offsets[i], kOffsetBits), "real_offset");
    b.put(kAddresses + i * kAddressBits, kAddressBits, m.addresses[i]);
    b.put(kLabels + i * kLabelBits, kLabelBits, m.path_labels[i]);
    b.put(kOffsets + i * kOffsetBits, kOffsetBits, m.real_offsets[i]);
  }
  b.put(kReplicaOffset, kOffsetBits, m.replica_meta_offset);
  b.put(kEncCtr, kEncCtrBits, m.enc_ctr.value);
  for (std::size_t i = 0; i < 2; ++i) {
    require(fits(m.child_macs[i].value, kMacBits), "child_mac");
    b.put(kChildMacs + i * kMacBits, kMacBits, m.child_macs[i].value);
  }
  return b;
}

BucketMetadata decode_bucket_metadata(const Block576& b) {
  BucketMetadata m;
  m.fbit = b.get(kFbit, 1);
  m.roffset = static_cast<std::uint8_t>(b.get(kRoffset, kRoffsetBits));
  for (std::size_t i = 0; i < kEcpCount; ++i)
    m.ecps[i] = static_cast<std::uint16_t>(b.get(kEcps + i * kEcpBits, kEcpBits));
  for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
    m.addresses[i] = static_cast<std::uint32_t>(b.get(kAddresses + i * kAddressBits, kAddressBits));
    m.path_labels[i] = static_cast<std::uint32_t>(b.get(kLabels + i * kLabelBits, kLabelBits));
    m.real_offsets[i] = static_cast<std::uint8_t>(b.get(kOffsets + i * kOffsetBits, kOffsetBits));
  }
  m.replica_meta_offset = static_cast<std::uint8_t>(b.get(kReplicaOffset, kOffsetBits));
  m.enc_ctr.value = b.get(kEncCtr, kEncCtrBits);
  for (std::size_t i = 0; i < 2; ++i) m.child_macs[i].value = b.get(kChildMacs + i * kMacBits, kMacBits);
  return m;
}

// Replica layout shares the metadata prefix up to the real offsets, then the
// child MACs follow directly: 404 + 108 = 512.
Block576 encode_replica_metadata(const BucketMetadata& m) {
  Block576 full = encode_bucket_metadata(m);
  Block576 r;
  for (std::size_t off = 0; off < kReplicaOffset; off += 64) {
    const std::size_t w = std::min<std::size_t>(64, kReplicaOffset - off);
    r.put(off, w, full.get(off, w));
  }
  for (std::size_t i = 0; i < 2; ++i) r.put(kReplicaChildMacs + i * kMacBits, kMacBits, m.child_macs[i].value);
  return r;
}

BucketMetadata decode_replica_metadata(const Block576& r, EncCtr ctr, std::uint8_t replica_offset) {
  Block576 full;
  for (std::size_t off = 0; off < kReplicaOffset; off += 64) {
    const std::size_t w = std::min<std::size_t>(64, kReplicaOffset - off);
    full.put(off, w, r.get(off, w));
  }
  BucketMetadata m = decode_bucket_metadata(full);
  m.replica_meta_offset = replica_offset;
  m.enc_ctr = ctr;
  for (std::size_t i = 0; i < 2; ++i) m.child_macs[i].value = r.get(kReplicaChildMacs + i * kMacBits, kMacBits);
  return m;
}

Block576 encode_must_node(const MustNodeNonLeaf& n) {
  Block576 b;
  require(fits(n.roffset, kNonLeafRoffsetBits), "roffset");
  b.put(kFbit, 1, n.fbit);
  b.put(kNonLeafRoffset, kNonLeafRoffsetBits, n.roffset);
  for (std::size_t i = 0; i < kNonLeafEcpCount; ++i) {
    require(fits(n.ecps[i], kMustEcpBits), "ecp");
    b.put(kNonLeafEcps + i * kMustEcpBits, kMustEcpBits, n.ecps[i]);
  }
  for (std::size_t i = 0; i < kNonLeafVrCount; ++i) b.put(kNonLeafVr + i * kVrBits, kVrBits, n.vr[i].encode());
  for (std::size_t i = 0; i < kNonLeafMacCount; ++i) {
    require(fits(n.child_macs[i].value, kMacBits), "child_mac");
    b.put(kNonLeafMacs + i * kMacBits, kMacBits, n.child_macs[i].value);
  }
  return b;
}

MustNodeNonLeaf decode_must_non_leaf(const Block576& b) {
  MustNodeNonLeaf n;
  n.fbit = b.get(kFbit, 1);
  n.roffset = static_cast<std::uint8_t>(b.get(kNonLeafRoffset, kNonLeafRoffsetBits));
  for (std::size_t i = 0; i < kNonLeafEcpCount; ++i)
    n.ecps[i] = static_cast<std::uint16_t>(b.get(kNonLeafEcps + i * kMustEcpBits, kMustEcpBits));
  for (std::size_t i = 0; i < kNonLeafVrCount; ++i)
    n.vr[i] = VRSet::decode(static_cast<std::uint16_t>(b.get(kNonLeafVr + i * kVrBits, kVrBits)));
  for (std::size_t i = 0; i < kNonLeafMacCount; ++i) n.child_macs[i].value = b.get(kNonLeafMacs + i * kMacBits, kMacBits);
  return n;
}

Block576 encode_must_node(const MustNodeLeaf& n) {
  Block576 b;
  require(fits(n.roffset, kLeafRoffsetBits), "roffset");
  require(n.ipoffsets.size() <= kMaxIpOffsets, "ipoffset count");
  b.put(kFbit, 1, n.fbit);
  b.put(kLeafRoffset, kLeafRoffsetBits, n.roffset);
  for (std::size_t i = 0; i < kLeafEcpCount; ++i) {
    require(fits(n.ecps[i], kMustEcpBits), "ecp");
    b.put(kLeafEcps + i * kMustEcpBits, kMustEcpBits, n.ecps[i]);
  }
  for (std::size_t i = 0; i < kLeafVrCount; ++i) b.put(kLeafVr + i * kVrBits, kVrBits, n.vr[i].encode());
  for (std::size_t i = 0; i < n.ipoffsets.size(); ++i) {
    require(fits(n.ipoffsets[i], kIpOffsetBits), "ipoffset");
    b.put(kLeafIpOffsets + i * kIpOffsetBits, kIpOffsetBits, n.ipoffsets[i]);
  }
  return b;
}

MustNodeLeaf decode_must_leaf(const Block576& b, std::size_t ipoffset_count) {
  if (ipoffset_count > kMaxIpOffsets) throw std::invalid_argument("codec: too many IPOffsets");
  MustNodeLeaf n;
  n.fbit = b.get(kFbit, 1);
  n.roffset = static_cast<std::uint8_t>(b.get(kLeafRoffset, kLeafRoffsetBits));
  for (std::size_t i = 0; i < kLeafEcpCount; ++i)
    n.ecps[i] = static_cast<std::uint16_t>(b.get(kLeafEcps + i * kMustEcpBits, kMustEcpBits));
  for (std::size_t i = 0; i < kLeafVrCount; ++i)
    n.vr[i] = VRSet::decode(static_cast<std::uint16_t>(b.get(kLeafVr + i * kVrBits, kVrBits)));
  n.ipoffsets.resize(ipoffset_count);
  for (std::size_t i = 0; i < ipoffset_count; ++i)
    n.ipoffsets[i] = static_cast<std::uint8_t>(b.get(kLeafIpOffsets + i * kIpOffsetBits, kIpOffsetBits));
  return n;
}

std::uint64_t pack_ecc_area(Mac54 mac, std::uint32_t partial_ctr) {
  return (mac.value & kMacMask) | (std::uint64_t{partial_ctr & kPartialMask} << 54);
}

EccArea unpack_ecc_area(std::uint64_t bits) {
  return {Mac54{bits & kMacMask}, static_cast<std::uint32_t>(bits >> 54)};
}

VRSet get_inline_vrset(const Block576& m) {
  return VRSet::decode(static_cast<std::uint16_t>(m.get(kInlineVr, kVrBits)));
}

void put_inline_vrset(Block576& m, VRSet vr) { m.put(kInlineVr, kVrBits, vr.encode()); }

namespace layout {

std::vector<Field> bucket_metadata() {
  std::vector<Field> f{{"fbit", kFbit, 1}, {"roffset", kRoffset, kRoffsetBits}};
  for (std::size_t i = 0; i < kEcpCount; ++i) f.push_back({"ecp[" + std::to_string(i) + "]", kEcps + i * kEcpBits, kEcpBits});
  for (std::size_t i = 0; i < kMaxRealSlots; ++i)
    f.push_back({"address[" + std::to_string(i) + "]", kAddresses + i * kAddressBits, kAddressBits});
  for (std::size_t i = 0; i < kMaxRealSlots; ++i)
    f.push_back({"path_label[" + std::to_string(i) + "]", kLabels + i * kLabelBits, kLabelBits});
  for (std::size_t i = 0; i < kMaxRealSlots; ++i)
    f.push_back({"real_offset[" + std::to_string(i) + "]", kOffsets + i * kOffsetBits, kOffsetBits});
  f.push_back({"replica_meta_offset", kReplicaOffset, kOffsetBits});
  f.push_back({"enc_ctr", kEncCtr, kEncCtrBits});
  f.push_back({"child_mac[0]", kChildMacs, kMacBits});
  f.push_back({"child_mac[1]", kChildMacs + kMacBits, kMacBits});
  return f;
}

std::vector<Field> replica_metadata() {
  std::vector<Field> f;
  for (auto& x : bucket_metadata())
    if (x.offset < kReplicaOffset) f.push_back(x);
  f.push_back({"child_mac[0]", kReplicaChildMacs, kMacBits});
  f.push_back({"child_mac[1]", kReplicaChildMacs + kMacBits, kMacBits});
  f.push_back({"ecc.mac", kEccMac, kMacBits});
  f.push_back({"ecc.partial_enc_ctr", kEccPartial, kPartialBits});
  return f;
}

std::vector<Field> must_non_leaf() {
  std::vector<Field> f{{"fbit", kFbit, 1}, {"roffset", kNonLeafRoffset, kNonLeafRoffsetBits}};
  for (std::size_t i = 0; i < kNonLeafEcpCount; ++i)
    f.push_back({"ecp[" + std::to_string(i) + "]", kNonLeafEcps + i * kMustEcpBits, kMustEcpBits});
  for (std::size_t i = 0; i < kNonLeafVrCount; ++i)
    f.push_back({"vr[" + std::to_string(i) + "]", kNonLeafVr + i * kVrBits, kVrBits});
  for (std::size_t i = 0; i < kNonLeafMacCount; ++i)
    f.push_back({"child_mac[" + std::to_string(i) + "]", kNonLeafMacs + i * kMacBits, kMacBits});
  return f;
}

std::vector<Field> must_leaf(std::size_t ipoffset_count) {
  std::vector<Field> f{{"fbit", kFbit, 1}, {"roffset", kLeafRoffset, kLeafRoffsetBits}};
  for (std::size_t i = 0; i < kLeafEcpCount; ++i)
    f.push_back({"ecp[" + std::to_string(i) + "]", kLeafEcps + i * kMustEcpBits, kMustEcpBits});
  for (std::size_t i = 0; i < kLeafVrCount; ++i) f.push_back({"vr[" + std::to_string(i) + "]", kLeafVr + i * kVrBits, kVrBits});
  for (std::size_t i = 0; i < ipoffset_count; ++i)
    f.push_back({"ipoffset[" + std::to_string(i) + "]", kLeafIpOffsets + i * kIpOffsetBits, kIpOffsetBits});
  const std::size_t used = kLeafIpOffsets + ipoffset_count * kIpOffsetBits;
  if (used < kBlockBits) f.push_back({"padding", used, kBlockBits - used});
  return f;
}

std::vector<Field> data_slot() {
  return {{"ciphertext", 0, kDataBits}, {"ecc.mac", kEccMac, kMacBits}, {"ecc.partial_enc_ctr", kEccPartial, kPartialBits}};
}

std::string manifest(std::size_t ipoffset_count) {
  std::ostringstream os;
  auto section = [&](const std::string& title, const std::vector<Field>& fields) {
    os << "[" << title << "]\n";
    std::size_t total = 0;
    for (const auto& x : fields) {
      os << x.name << " " << x.offset << " " << x.width << "\n";
      total += x.width;
    }
    os << "total " << total << "\n\n";
  };
  section("bucket_metadata", bucket_metadata());
  section("replica_metadata", replica_metadata());
  section("data_slot", data_slot());
  section("must_non_leaf", must_non_leaf());
  section("must_leaf", must_leaf(ipoffset_count));
  os << "# vr sets: bits 0-11 complemented valid bits (1 = consumed), bits 12-14 read counter\n";
  os << "# bucket ecp: bits 0-12 cell address in the 7488-bit bucket, bit 13 correct value\n";
  os << "# must ecp: bits 0-9 bit address in the node, bit 10 correct value, bit 11 in use\n";
  os << "# without a MUST the vr set of a bucket occupies metadata bits 4-18\n";
  return os.str();
}

}  // namespace layout
}  // namespace iro

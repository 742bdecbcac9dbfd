#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "iro/bits.hpp"
#include "iro/crypto.hpp"

namespace iro {

inline constexpr std::size_t kMaxRealSlots = 5;
inline constexpr std::size_t kSlotsPerBucket = 12;
inline constexpr std::size_t kBlocksPerBucket = kSlotsPerBucket + 1;
inline constexpr std::uint32_t kEmptyAddress = 0xffffffffu;

// 12 valid bits (one per slot) plus a 3-bit read counter. On the wire the
// valid bits are stored complemented (1 = slot consumed) so an all-zero field
// is a freshly shuffled bucket.
struct VRSet {
  std::uint16_t valid = 0xfff;
  std::uint8_t read_ctr = 0;

  static VRSet fresh() { return {}; }
  bool is_valid(std::size_t slot) const { return (valid >> slot) & 1u; }
  void consume(std::size_t slot) {
    valid = static_cast<std::uint16_t>(valid & ~(1u << slot));
    ++read_ctr;
  }
  std::uint16_t encode() const;
  static VRSet decode(std::uint16_t bits15);
  friend bool operator==(const VRSet&, const VRSet&) = default;
};

struct BucketMetadata {
  bool fbit = false;
  std::uint8_t roffset = 0;
  std::array<std::uint16_t, 5> ecps{};  // raw 14-bit entries, physical order
  std::array<std::uint32_t, kMaxRealSlots> addresses{};
  std::array<std::uint32_t, kMaxRealSlots> path_labels{};
  std::array<std::uint8_t, kMaxRealSlots> real_offsets{};
  std::uint8_t replica_meta_offset = 0;
  EncCtr enc_ctr;
  std::array<Mac54, 2> child_macs{};

  // Entries with address == kEmptyAddress are unused.
  static BucketMetadata empty();
  friend bool operator==(const BucketMetadata&, const BucketMetadata&) = default;
};

struct MustNodeNonLeaf {
  bool fbit = false;
  std::uint8_t roffset = 0;
  std::array<std::uint16_t, 3> ecps{};  // raw 12-bit entries
  std::array<VRSet, 7> vr{};
  std::array<Mac54, 8> child_macs{};
  friend bool operator==(const MustNodeNonLeaf&, const MustNodeNonLeaf&) = default;
};

struct MustNodeLeaf {
  bool fbit = false;
  std::uint8_t roffset = 0;
  std::array<std::uint16_t, 7> ecps{};
  std::array<VRSet, 31> vr{};
  std::vector<std::uint8_t> ipoffsets;  // one 3-bit entry per non-leaf MUST level
  friend bool operator==(const MustNodeLeaf&, const MustNodeLeaf&) = default;
};

// Bit positions of every layout. Offsets are LSB-first within the block.
namespace layout {
// Bucket metadata block.
inline constexpr std::size_t kFbit = 0;
inline constexpr std::size_t kRoffset = 1, kRoffsetBits = 3;
inline constexpr std::size_t kEcps = 4, kEcpBits = 14, kEcpCount = 5;
inline constexpr std::size_t kAddresses = 74, kAddressBits = 32;
inline constexpr std::size_t kLabels = 234, kLabelBits = 30;
inline constexpr std::size_t kOffsets = 384, kOffsetBits = 4;
inline constexpr std::size_t kReplicaOffset = 404;
inline constexpr std::size_t kEncCtr = 408, kEncCtrBits = 60;
inline constexpr std::size_t kChildMacs = 468, kMacBits = 54;
// Encrypted span: addresses, labels, real offsets, replica offset.
inline constexpr std::size_t kSensitiveBegin = kAddresses, kSensitiveEnd = kEncCtr;
// Without a MUST the slot valid bits and read counter sit in the ECP area.
inline constexpr std::size_t kInlineVr = kEcps, kVrBits = 15;

// Metadata replica (data area of a slot, before encryption).
inline constexpr std::size_t kReplicaChildMacs = 404;

// MUST nodes.
inline constexpr std::size_t kMustEcpBits = 12;
inline constexpr std::size_t kNonLeafRoffset = 1, kNonLeafRoffsetBits = 2;
inline constexpr std::size_t kNonLeafEcps = 3, kNonLeafEcpCount = 3;
inline constexpr std::size_t kNonLeafVr = 39, kNonLeafVrCount = 7;
inline constexpr std::size_t kNonLeafMacs = 144, kNonLeafMacCount = 8;
inline constexpr std::size_t kLeafRoffset = 1, kLeafRoffsetBits = 3;
inline constexpr std::size_t kLeafEcps = 4, kLeafEcpCount = 7;
inline constexpr std::size_t kLeafVr = 88, kLeafVrCount = 31;
inline constexpr std::size_t kLeafIpOffsets = 553, kIpOffsetBits = 3;
inline constexpr std::size_t kMaxIpOffsets = (kBlockBits - kLeafIpOffsets) / kIpOffsetBits;

// ECC area of a data slot: 54-bit MAC low, 10-bit partial counter high.
inline constexpr std::size_t kEccMac = 512, kEccPartial = 566, kPartialBits = 10;

struct Field {
  std::string name;
  std::size_t offset;
  std::size_t width;
};

std::vector<Field> bucket_metadata();
std::vector<Field> replica_metadata();
std::vector<Field> must_non_leaf();
std::vector<Field> must_leaf(std::size_t ipoffset_count);
std::vector<Field> data_slot();

// Human-readable manifest of all layouts.
std::string manifest(std::size_t ipoffset_count = 4);
}  // namespace layout

Block576 encode_bucket_metadata(const BucketMetadata& m);
BucketMetadata decode_bucket_metadata(const Block576& bits);

// Replica data area: the metadata without its EncCtr and replica offset.
Block576 encode_replica_metadata(const BucketMetadata& m);
BucketMetadata decode_replica_metadata(const Block576& bits, EncCtr ctr, std::uint8_t replica_offset);

Block576 encode_must_node(const MustNodeNonLeaf& n);
MustNodeNonLeaf decode_must_non_leaf(const Block576& bits);
Block576 encode_must_node(const MustNodeLeaf& n);
MustNodeLeaf decode_must_leaf(const Block576& bits, std::size_t ipoffset_count);

std::uint64_t pack_ecc_area(Mac54 mac, std::uint32_t partial_ctr);
struct EccArea {
  Mac54 mac;
  std::uint32_t partial_ctr = 0;
};
EccArea unpack_ecc_area(std::uint64_t bits);

VRSet get_inline_vrset(const Block576& metadata);
void put_inline_vrset(Block576& metadata, VRSet vr);

}  // namespace iro

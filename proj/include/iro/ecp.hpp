#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iro/bits.hpp"

namespace iro {

class ReliabilityAlarm : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Where an ECP array lives inside its host block and how entries are packed.
struct EcpLayout {
  std::size_t entry_count;
  std::size_t entry_bits;
  std::size_t address_bits;
  std::size_t region_offset;   // bit offset of physical entry 0 in the host block
  std::size_t roffset_offset;  // rotation field
  std::size_t roffset_bits;
  bool in_use_flag;            // MUST entries carry an explicit in-use bit
  std::uint32_t address_limit; // exclusive upper bound of repairable addresses

  std::size_t region_end() const { return region_offset + entry_count * entry_bits; }
  bool in_region(std::uint32_t addr) const { return addr >= region_offset && addr < region_end(); }
  // Fields that cannot be repaired because decoding needs them first.
  bool in_header(std::uint32_t addr) const { return addr < region_offset; }

  static EcpLayout bucket();
  static EcpLayout must_non_leaf();
  static EcpLayout must_leaf();
};

struct EcpEntry {
  std::uint32_t address = 0;
  bool value = false;
  bool in_use = false;
  friend bool operator==(const EcpEntry&, const EcpEntry&) = default;
};

std::uint16_t encode_ecp_entry(const EcpLayout& l, const EcpEntry& e);
EcpEntry decode_ecp_entry(const EcpLayout& l, std::uint16_t raw);

inline std::size_t physical_slot(const EcpLayout& l, std::size_t logical, std::size_t roffset) {
  return (logical + roffset) % l.entry_count;
}

// Decodes the entries front-to-back (logical order). Each entry is read after
// the earlier ones have repaired bits of the host block.
std::vector<EcpEntry> read_ecps(const Block576& host_raw, const EcpLayout& l);

// Overrides each in-use entry's target bit that lies in [base, base + 576).
Block576 apply_ecps(const Block576& raw, std::span<const EcpEntry> entries, std::uint32_t base = 0);

// read_ecps + apply_ecps on the host block itself.
Block576 repair_host(const Block576& host_raw, const EcpLayout& l);

struct EcpPlan {
  std::size_t roffset = 0;
  std::vector<std::optional<std::uint32_t>> targets;  // per logical entry
  std::size_t used() const;
  bool covers(std::uint32_t addr) const;
};

// Assigns entries to faulty addresses so that every fault inside the ECP
// region is repaired by an entry in front of the faulty one. Tries
// `preferred_roffset` first, then every rotation in increasing order.
// Returns nullopt when no rotation works (capacity exceeded).
std::optional<EcpPlan> allocate_ecp(const EcpLayout& l, std::vector<std::uint32_t> faults,
                                    std::size_t preferred_roffset = 0);

// Node and mirror share one entry array: the fault set is the union of both
// copies' faulty bit positions and rotations apply to both copies.
std::optional<EcpPlan> allocate_ecp_mirrored(const EcpLayout& l, std::span<const std::uint32_t> node_faults,
                                             std::span<const std::uint32_t> mirror_faults,
                                             std::size_t preferred_roffset = 0);

// Writes fbit, roffset and the entries into `host`. Every non-ECP field of the
// host must already hold its final value. `external_bit` supplies the correct
// value for targets outside the host block (address >= 576).
void embed_ecps(Block576& host, const EcpLayout& l, const EcpPlan& plan,
                const std::function<bool(std::uint32_t)>& external_bit = {});

// Faulty addresses currently recorded in a decoded entry array.
std::vector<std::uint32_t> recorded_faults(std::span<const EcpEntry> entries);

enum class FaultClass { transient, permanent, device };

// Compares the written value with an immediate re-read. A handful of flipped
// cells is a permanent cell fault; wholesale corruption is a device failure.
inline constexpr std::size_t kMaxCellFaultsPerBlock = 8;
FaultClass classify_fault(const Block576& written, const Block576& reread);
std::vector<std::uint32_t> differing_bits(const Block576& a, const Block576& b);

// Cached bucket -> spare-bucket indirection. Lookups cost no DRAM traffic.
class RemapTable {
 public:
  explicit RemapTable(std::size_t capacity = 1084) : capacity_(capacity) {}

  std::uint64_t remap(std::uint64_t bucket);
  std::optional<std::uint64_t> lookup(std::uint64_t bucket) const;
  std::size_t size() const { return table_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t encoded_bytes(std::size_t bucket_id_bits) const;
  std::string listing() const;
  const std::map<std::uint64_t, std::uint64_t>& entries() const { return table_; }

 private:
  std::size_t capacity_;
  std::map<std::uint64_t, std::uint64_t> table_;
};

}  // namespace iro

namespace iro {

// Bucket-wide ECP addresses: the metadata block is host block 0, slot s is
// block s + 1. 13 blocks x 576 bits fit the 13-bit address field.
inline std::uint32_t bucket_bit_address(std::int32_t slot, std::uint32_t bit) {
  return static_cast<std::uint32_t>((slot + 1) * static_cast<std::int32_t>(kBlockBits)) + bit;
}
inline std::int32_t bucket_address_slot(std::uint32_t addr) {
  return static_cast<std::int32_t>(addr / kBlockBits) - 1;
}

}  // namespace iro

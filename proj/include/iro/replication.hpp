#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "iro/codec.hpp"

namespace iro {

// Block k of bucket b sits at linear index 13*b + k and channels interleave
// on the lowest address bits, so with two channels the channel is a parity.
inline std::uint32_t slot_channel(std::uint64_t bucket, std::int32_t slot) {
  const std::int64_t k = slot < 0 ? static_cast<std::int64_t>(kSlotsPerBucket) : slot;
  return static_cast<std::uint32_t>((bucket * kBlocksPerBucket + static_cast<std::uint64_t>(k)) & 1u);
}
inline std::uint32_t meta_channel(std::uint64_t bucket) { return slot_channel(bucket, -1); }

// The six slot indices of a bucket on `channel`, left to right.
std::array<std::uint8_t, 6> channel_slots(std::uint64_t bucket, std::uint32_t channel);

struct ReplicaPlan {
  std::int8_t meta_replica = -1;
  // Indexed like the metadata entries; -1 for unused entries.
  std::array<std::int8_t, kMaxRealSlots> real_replicas{-1, -1, -1, -1, -1};
  friend bool operator==(const ReplicaPlan&, const ReplicaPlan&) = default;
};

// True when a slot cannot hold the metadata replica.
using SlotRejector = std::function<bool(std::uint8_t slot)>;

// Metadata replica first, then real blocks in address order, each in the
// leftmost free dummy slot on the opposite channel. nullopt asks the caller
// to re-permute.
std::optional<ReplicaPlan> plan_replicas(std::uint64_t bucket, std::span<const std::uint8_t> real_offsets,
                                         std::span<const std::uint32_t> addresses,
                                         const SlotRejector& reject_meta_slot = {});

// Rejects every slot holding a fault recorded in the bucket's ECP entries.
// That covers the ECP-aligned span and also keeps the replica free of
// ECP-repaired bits, whose stored values would depend on the replica itself.
SlotRejector meta_replica_rejector(const BucketMetadata& m);

// Recomputes the plan from trusted metadata.
std::optional<ReplicaPlan> locate_replica(std::uint64_t bucket, const BucketMetadata& m);

class IncompleteCounter : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using CtrShards = std::array<std::uint16_t, 6>;

// Shard j holds bits [10j, 10j + 10) of the counter.
CtrShards split_encctr(EncCtr ctr);
EncCtr join_encctr(std::span<const std::optional<std::uint16_t>> shards);
EncCtr join_encctr(const CtrShards& shards);

// Shard stored in a slot's ECC area: the slot's rank among its channel's slots.
std::uint32_t shard_for_slot(std::uint64_t bucket, std::uint8_t slot, EncCtr ctr);

}  // namespace iro

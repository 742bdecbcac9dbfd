#include "iro/replication.hpp"

#include <algorithm>
#include <numeric>

#include "iro/ecp.hpp"

namespace iro {

std::array<std::uint8_t, 6> channel_slots(std::uint64_t bucket, std::uint32_t channel) {
  std::array<std::uint8_t, 6> out{};
  std::size_t n = 0;
  for (std::uint8_t s = 0; s < kSlotsPerBucket; ++s)
    if (slot_channel(bucket, s) == channel) out[n++] = s;
  return out;
}

std::optional<ReplicaPlan> plan_replicas(std::uint64_t bucket, std::span<const std::uint8_t> real_offsets,
                                         std::span<const std::uint32_t> addresses,
                                         const SlotRejector& reject_meta_slot) {
  std::array<bool, kSlotsPerBucket> taken{};
  std::vector<std::size_t> reals;
  for (std::size_t i = 0; i < std::min(real_offsets.size(), addresses.size()); ++i) {
    if (addresses[i] == kEmptyAddress) continue;
    taken[real_offsets[i]] = true;
    reals.push_back(i);
  }
  std::stable_sort(reals.begin(), reals.end(), [&](std::size_t a, std::size_t b) { return addresses[a] < addresses[b]; });

  auto pick = [&](std::uint32_t channel, const SlotRejector& reject) -> std::int8_t {
    for (auto s : channel_slots(bucket, channel)) {
      if (taken[s] || (reject && reject(s))) continue;
      taken[s] = true;
      return static_cast<std::int8_t>(s);
    }
    return -1;
  };

  ReplicaPlan plan;
  plan.meta_replica = pick(1 - meta_channel(bucket), reject_meta_slot);
  if (plan.meta_replica < 0) return std::nullopt;
  for (auto i : reals) {
    const auto s = pick(1 - slot_channel(bucket, real_offsets[i]), {});
    if (s < 0) return std::nullopt;
    plan.real_replicas[i] = s;
  }
  return plan;
}

SlotRejector meta_replica_rejector(const BucketMetadata& m) {
  const auto l = EcpLayout::bucket();
  std::array<bool, kSlotsPerBucket> bad{};
  for (auto raw : m.ecps) {
    const auto e = decode_ecp_entry(l, raw);
    if (!e.in_use) continue;
    const auto slot = bucket_address_slot(e.address);
    if (slot >= 0 && slot < static_cast<std::int32_t>(kSlotsPerBucket)) bad[static_cast<std::size_t>(slot)] = true;
  }
  if (std::none_of(bad.begin(), bad.end(), [](bool b) { return b; })) return {};
  return [bad](std::uint8_t s) { return bad[s]; };
}

std::optional<ReplicaPlan> locate_replica(std::uint64_t bucket, const BucketMetadata& m) {
  return plan_replicas(bucket, m.real_offsets, m.addresses, meta_replica_rejector(m));
}

CtrShards split_encctr(EncCtr ctr) {
  CtrShards s{};
  for (std::size_t j = 0; j < s.size(); ++j) s[j] = static_cast<std::uint16_t>((ctr.value >> (10 * j)) & kPartialMask);
  return s;
}

EncCtr join_encctr(std::span<const std::optional<std::uint16_t>> shards) {
  if (shards.size() != 6) throw IncompleteCounter("join_encctr: need six shards");
  std::uint64_t v = 0;
  for (std::size_t j = 0; j < 6; ++j) {
    if (!shards[j]) throw IncompleteCounter("join_encctr: shard " + std::to_string(j) + " missing");
    v |= (std::uint64_t{*shards[j]} & kPartialMask) << (10 * j);
  }
  return {v};
}

EncCtr join_encctr(const CtrShards& shards) {
  std::array<std::optional<std::uint16_t>, 6> s;
  std::copy(shards.begin(), shards.end(), s.begin());
  return join_encctr(s);
}

std::uint32_t shard_for_slot(std::uint64_t bucket, std::uint8_t slot, EncCtr ctr) {
  const auto slots = channel_slots(bucket, slot_channel(bucket, slot));
  const auto rank = static_cast<std::size_t>(std::find(slots.begin(), slots.end(), slot) - slots.begin());
  return split_encctr(ctr)[rank];
}

}  // namespace iro

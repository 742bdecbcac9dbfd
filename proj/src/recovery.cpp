// Recovery for the replicated schemes. Every operation finishes its DRAM
// reads before it writes anything, so a channel rebuild started from inside
// an operation always sees a consistent image and the operation can go on
// with the values it already holds.

#include <algorithm>
#include <deque>

#include "iro/oram.hpp"
#include "oram_detail.hpp"

namespace iro {

namespace {

using detail::level_of;
using detail::position_of;
using detail::to_block;
using detail::to_data;

std::vector<std::uint32_t> faults_in_block(const std::vector<EcpEntry>& entries, std::uint32_t base) {
  std::vector<std::uint32_t> out;
  for (const auto& e : entries)
    if (e.in_use && e.address >= base && e.address < base + kBlockBits) out.push_back(e.address - base);
  return out;
}

}  // namespace

void Controller::violation(std::uint64_t id, std::uint32_t level, bool must_node, const std::string& cause) {
  ++stats_.violations;
  violations_.push_back({access_count_, id, level, must_node, cause});
}

FaultClass Controller::write_back_and_classify(std::uint64_t index, const Block576& intended, BlockKind kind,
                                               const std::vector<std::uint32_t>& known,
                                               std::vector<std::uint32_t>& bits) {
  write_raw(index, intended, kind);
  const Block576 reread = read_raw(index, kind);
  bits.clear();
  for (auto b : differing_bits(intended, reread))
    if (std::find(known.begin(), known.end(), b) == known.end()) bits.push_back(b);
  FaultClass c = FaultClass::transient;
  if (bits.size() > kMaxCellFaultsPerBlock)
    c = FaultClass::device;
  else if (!bits.empty())
    c = FaultClass::permanent;
  switch (c) {
    case FaultClass::transient: ++stats_.transient_faults; break;
    case FaultClass::permanent: ++stats_.permanent_faults; break;
    case FaultClass::device: ++stats_.device_faults; break;
  }
  return c;
}

bool Controller::channel_healthy(std::uint32_t channel) {
  auto guard = enter(Phase::probe);
  const std::uint64_t index = layout_.probe_base + channel;
  Block576 pattern;
  for (std::size_t w = 0; w < Block576::kWords; ++w) pattern.set_word(w, aux_rng_());
  write_raw(index, pattern, BlockKind::data);
  const Block576 back = read_raw(index, BlockKind::data);
  return differing_bits(pattern, back).size() <= kMaxCellFaultsPerBlock;
}

void Controller::handle_fault(std::uint64_t bucket, std::int32_t slot, FaultClass c,
                              const std::vector<std::uint32_t>& bits, std::uint32_t channel) {
  if (c == FaultClass::permanent) {
    auto& pend = pending_faults_[bucket];
    for (auto b : bits) pend.push_back(bucket_bit_address(slot, b));
  } else if (c == FaultClass::device) {
    recover_channel(channel);
  }
}

// Probes both channels and rebuilds whichever died. True if one was rebuilt.
static bool rebuild_dead_channels(Controller& c, const std::function<bool(std::uint32_t)>& healthy) {
  bool any = false;
  for (std::uint32_t ch = 0; ch < 2; ++ch)
    if (!healthy(ch)) {
      c.recover_channel(ch);
      any = true;
    }
  return any;
}

// --- Case 1 --------------------------------------------------------------------

Block576 Controller::recover_slot(Fetched& f, std::uint32_t slot, const Block576& raw) {
  (void)raw;
  auto guard = enter(Phase::recovery);
  RecoveryEvent ev;
  ev.kind = 1;
  ev.id = f.bucket;
  const std::uint64_t phys = physical_bucket(f.bucket);
  const std::uint32_t ch = slot_channel(phys, static_cast<std::int32_t>(slot));
  const auto base = bucket_bit_address(static_cast<std::int32_t>(slot), 0);

  Block576 intended;
  bool ok = true;
  for (int attempt = 0; attempt < 2; ++attempt) {
    ok = true;
    if (f.meta.enc_ctr.value == 0) break;  // never written: all zero

    // Fetch the whole opposite half of the bucket so the source is hidden.
    std::array<Block576, kSlotsPerBucket> other{};
    for (auto s : channel_slots(phys, 1 - ch)) {
      const Block576 r = read_raw(block_index(f.bucket, s), BlockKind::data);
      other[s] = f.ecps.empty() ? r : apply_ecps(r, f.ecps, bucket_bit_address(s, 0));
      ++ev.blocks_fetched;
    }
    sync();

    const auto plan = locate_replica(phys, f.meta);
    std::optional<std::uint32_t> source;
    std::size_t entry = kMaxRealSlots;
    for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
      if (f.meta.addresses[i] == kEmptyAddress) continue;
      const auto rep = static_cast<std::uint32_t>(plan->real_replicas[i]);
      if (f.meta.real_offsets[i] == slot) source = rep, entry = i;
      if (rep == slot) source = f.meta.real_offsets[i], entry = i;
    }
    if (!source) {
      // Dummies and the metadata replica are derived from the metadata.
      intended = slot == f.meta.replica_meta_offset ? meta_replica_block(f.bucket, f.meta)
                                                     : seal_slot(f.bucket, slot, f.meta.enc_ctr, Block576{}, MacDomain::data);
      break;
    }
    ++ev.mac_trials;
    if (slot_mac_ok(f.bucket, *source, f.meta.enc_ctr, other[*source], MacDomain::data)) {
      const Block576 plain = open_slot(f.bucket, *source, f.meta.enc_ctr, other[*source]);
      intended = seal_slot(f.bucket, slot, f.meta.enc_ctr, plain, MacDomain::data);
      (void)entry;
      break;
    }
    ok = false;
    if (attempt == 0 && rebuild_dead_channels(*this, [this](std::uint32_t c) { return channel_healthy(c); })) continue;
    break;
  }
  if (!ok) {
    ev.success = false;
    recoveries_.push_back(ev);
    throw IntegrityViolation("slot " + std::to_string(slot) + " of bucket " + std::to_string(f.bucket) +
                             " and its replica both failed verification");
  }

  std::vector<std::uint32_t> bits;
  const auto c = write_back_and_classify(block_index(f.bucket, slot), intended, BlockKind::data,
                                         faults_in_block(f.ecps, base), bits);
  ev.success = true;
  ev.fault = c;
  ++stats_.recoveries[1];
  recoveries_.push_back(ev);
  handle_fault(f.bucket, static_cast<std::int32_t>(slot), c, bits, ch);
  return intended;
}

// --- Case 2 --------------------------------------------------------------------

std::optional<std::pair<BucketMetadata, Block576>> Controller::metadata_from_replicas(std::uint64_t bucket,
                                                                                      Mac54 expected,
                                                                                      std::uint32_t channel,
                                                                                      RecoveryEvent& ev) {
  const std::uint64_t phys = physical_bucket(bucket);
  const auto slots = channel_slots(phys, channel);
  std::array<Block576, kSlotsPerBucket> raw{};
  CtrShards shards{};
  for (std::size_t j = 0; j < slots.size(); ++j) {
    raw[slots[j]] = read_raw(block_index(bucket, slots[j]), BlockKind::data);
    shards[j] = static_cast<std::uint16_t>(unpack_ecc_area(raw[slots[j]].ecc_area()).partial_ctr);
    ++ev.blocks_fetched;
  }
  sync();

  auto try_ctr = [&](EncCtr ctr) -> std::optional<std::pair<BucketMetadata, Block576>> {
    if (ctr.value == 0) return std::nullopt;
    for (auto s : slots) {
      // The replica slot never carries recorded faults, so raw is exact.
      const Block576 pt = open_slot(bucket, s, ctr, raw[s]);
      const BucketMetadata m = decode_replica_metadata(pt, ctr, s);
      ++ev.mac_trials;
      Block576 candidate;
      try {
        candidate = seal_metadata(bucket, m, VRSet{});
      } catch (const std::exception&) {
        continue;  // field out of range: not the replica
      }
      if (metadata_mac(bucket, candidate) == expected) return std::pair{open_metadata(bucket, candidate), candidate};
    }
    return std::nullopt;
  };

  if (auto r = try_ctr(join_encctr(shards))) return r;
  // A damaged shard: take the counter from the metadata channel's slots.
  CtrShards alt{};
  const auto same = channel_slots(phys, 1 - channel);
  for (std::size_t j = 0; j < same.size(); ++j) {
    const Block576 r = read_raw(block_index(bucket, same[j]), BlockKind::data);
    alt[j] = static_cast<std::uint16_t>(unpack_ecc_area(r.ecc_area()).partial_ctr);
    ++ev.blocks_fetched;
  }
  sync();
  if (alt != shards)
    if (auto r = try_ctr(join_encctr(alt))) return r;
  return std::nullopt;
}

Controller::Fetched Controller::recover_metadata(std::uint64_t bucket, Mac54 expected, const Block576& raw) {
  (void)raw;
  auto guard = enter(Phase::recovery);
  RecoveryEvent ev;
  ev.kind = 2;
  ev.id = bucket;
  const std::uint64_t phys = physical_bucket(bucket);
  const std::uint32_t ch = meta_channel(phys);

  Block576 intended;
  bool ok = !expected.is_sentinel() ? false : true;  // a sentinel child must read all-zero
  for (int attempt = 0; !ok && attempt < 2; ++attempt) {
    if (attempt == 1) {
      if (!rebuild_dead_channels(*this, [this](std::uint32_t c) { return channel_healthy(c); })) break;
      // The rebuild restored this block if its channel died; re-check it.
      Block576 again = read_raw(block_index(bucket, kSlotsPerBucket), BlockKind::metadata);
      if (again.bit(layout::kFbit)) again = repair_host(again, EcpLayout::bucket());
      ++ev.mac_trials;
      if (metadata_mac(bucket, again) == expected) {
        intended = again;
        ok = true;
        break;
      }
    }
    if (auto r = metadata_from_replicas(bucket, expected, 1 - ch, ev)) {
      intended = r->second;
      ok = true;
    }
  }
  if (!ok) {
    recoveries_.push_back(ev);
    throw IntegrityViolation("metadata of bucket " + std::to_string(bucket) + " could not be recovered");
  }

  std::vector<EcpEntry> entries;
  if (intended.bit(layout::kFbit)) entries = read_ecps(intended, EcpLayout::bucket());
  std::vector<std::uint32_t> bits;
  const auto c = write_back_and_classify(block_index(bucket, kSlotsPerBucket), intended, BlockKind::metadata,
                                         faults_in_block(entries, 0), bits);
  ev.success = true;
  ev.fault = c;
  ++stats_.recoveries[2];
  recoveries_.push_back(ev);
  handle_fault(bucket, -1, c, bits, ch);

  Fetched f;
  f.bucket = bucket;
  f.expected = expected;
  f.stored = intended;
  f.ecps = std::move(entries);
  f.meta = open_metadata(bucket, intended);
  return f;
}

// --- MUST mirror repair --------------------------------------------------------------

Controller::MustNodeState Controller::recover_must_node(std::uint64_t id, std::uint32_t must_level, Mac54 expected,
                                                        bool mirror, const Block576& raw) {
  (void)raw;
  auto guard = enter(Phase::recovery);
  RecoveryEvent ev;
  ev.kind = 4;
  ev.id = id;
  const auto& l = must_ecp_layout(must_level);
  auto verify = [&](const Block576& stored) {
    ++ev.mac_trials;
    return expected.is_sentinel() ? stored.is_zero() : must_node_mac(id, stored) == expected;
  };

  Block576 good;
  bool ok = false;
  for (int attempt = 0; !ok && attempt < 2; ++attempt) {
    if (attempt == 1 && !rebuild_dead_channels(*this, [this](std::uint32_t c) { return channel_healthy(c); })) break;
    for (bool copy : {!mirror, mirror}) {
      Block576 r = read_raw(must_block_index(id, copy), copy ? BlockKind::mirror : BlockKind::must);
      ++ev.blocks_fetched;
      if (r.bit(0)) r = repair_host(r, l);
      if (verify(r)) {
        good = r;
        ok = true;
        break;
      }
    }
    sync();
  }
  if (!ok) {
    recoveries_.push_back(ev);
    throw IntegrityViolation("MUST node " + std::to_string(id) + " and its mirror both failed verification");
  }

  std::vector<EcpEntry> entries;
  if (good.bit(0)) entries = read_ecps(good, l);
  const std::uint64_t index = must_block_index(id, mirror);
  std::vector<std::uint32_t> bits;
  const auto c = write_back_and_classify(index, good, mirror ? BlockKind::mirror : BlockKind::must,
                                         faults_in_block(entries, 0), bits);
  ev.success = true;
  ev.fault = c;
  ++stats_.recoveries[4];
  recoveries_.push_back(ev);
  if (c == FaultClass::permanent) {
    auto& pend = pending_must_faults_[id];
    pend.insert(pend.end(), bits.begin(), bits.end());
  } else if (c == FaultClass::device) {
    recover_channel(dram_.channel_of(index));
  }
  return decode_must_state(id, must_level, good);
}

// --- Case 3 ------------------------------------------------------------------------

void Controller::recover_channel(std::uint32_t channel) {
  if (!feat_.replication) throw UnrecoverableFailure("channel rebuild needs a replicated scheme");
  if (channel >= 2) throw std::out_of_range("channel");
  auto guard = enter(Phase::recovery);
  dram_.replace_channel(channel);
  rebuild_channel(channel);
  rebuild_must_channel(channel);
  sync();
  ++stats_.recoveries[3];
  RecoveryEvent ev;
  ev.kind = 3;
  ev.id = channel;
  ev.success = true;
  ev.fault = FaultClass::device;
  recoveries_.push_back(ev);
}

void Controller::rebuild_channel(std::uint32_t channel) {
  std::deque<std::pair<std::uint64_t, Mac54>> todo;
  for (std::uint64_t i = 0; i < anchor_.size(); ++i)
    if (!anchor_[i].is_sentinel()) todo.push_back({(std::uint64_t{1} << cfg_.cached_levels) - 1 + i, anchor_[i]});

  while (!todo.empty()) {
    const auto [b, expected] = todo.front();
    todo.pop_front();
    const std::uint64_t phys = physical_bucket(b);
    const std::uint32_t mch = meta_channel(phys);

    Block576 stored;
    if (mch != channel) {
      stored = read_raw(block_index(b, kSlotsPerBucket), BlockKind::metadata);
      if (stored.bit(layout::kFbit)) stored = repair_host(stored, EcpLayout::bucket());
      if (metadata_mac(b, stored) != expected)
        throw UnrecoverableFailure("bucket " + std::to_string(b) + ": surviving metadata failed verification");
    } else {
      RecoveryEvent scratch;
      auto r = metadata_from_replicas(b, expected, 1 - channel, scratch);
      if (!r) throw UnrecoverableFailure("bucket " + std::to_string(b) + ": metadata replica lost");
      stored = r->second;
      write_raw(block_index(b, kSlotsPerBucket), stored, BlockKind::metadata);
    }
    const BucketMetadata m = open_metadata(b, stored);
    std::vector<EcpEntry> entries;
    if (stored.bit(layout::kFbit)) entries = read_ecps(stored, EcpLayout::bucket());

    if (m.enc_ctr.value != 0) {
      const auto plan = locate_replica(phys, m);
      if (!plan) throw UnrecoverableFailure("bucket " + std::to_string(b) + ": no replica plan");
      std::array<Data, kMaxRealSlots> reals{};
      for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
        if (m.addresses[i] == kEmptyAddress) continue;
        std::uint32_t s = m.real_offsets[i];
        if (slot_channel(phys, static_cast<std::int32_t>(s)) == channel) s = static_cast<std::uint32_t>(plan->real_replicas[i]);
        Block576 r = read_raw(block_index(b, s), BlockKind::data);
        if (!entries.empty()) r = apply_ecps(r, entries, bucket_bit_address(static_cast<std::int32_t>(s), 0));
        if (!slot_mac_ok(b, s, m.enc_ctr, r, MacDomain::data))
          throw UnrecoverableFailure("bucket " + std::to_string(b) + ": surviving copy of a block failed verification");
        reals[i] = to_data(open_slot(b, s, m.enc_ctr, r));
      }
      const auto slots = build_slots(b, m, reals);
      for (auto s : channel_slots(phys, channel)) write_raw(block_index(b, s), slots[s], BlockKind::data);
    }
    sync();

    if (level_of(b) + 1 < cfg_.tree_levels)
      for (std::size_t c = 0; c < 2; ++c)
        if (!m.child_macs[c].is_sentinel()) todo.push_back({2 * b + 1 + c, m.child_macs[c]});
  }
}

void Controller::rebuild_must_channel(std::uint32_t channel) {
  if (!feat_.must) return;
  // Primaries live on channel 0, mirrors on channel 1.
  const bool rebuild_mirror = channel == 1;
  const std::uint64_t fanout = std::uint64_t{1} << must_.nonleaf_span;
  std::deque<std::tuple<std::uint32_t, std::uint64_t, Mac54>> todo;
  for (std::uint64_t i = 0; i < must_anchor_.size(); ++i)
    if (!must_anchor_[i].is_sentinel()) todo.push_back({must_.cached_must_levels, i, must_anchor_[i]});
  while (!todo.empty()) {
    const auto [m, idx, expected] = todo.front();
    todo.pop_front();
    const std::uint64_t id = must_.level_base(m) + idx;
    Block576 r = read_raw(must_block_index(id, !rebuild_mirror), rebuild_mirror ? BlockKind::must : BlockKind::mirror);
    Block576 stored = r.bit(0) ? repair_host(r, must_ecp_layout(m)) : r;
    if (must_node_mac(id, stored) != expected)
      throw UnrecoverableFailure("MUST node " + std::to_string(id) + ": surviving copy failed verification");
    write_raw(must_block_index(id, rebuild_mirror), stored, rebuild_mirror ? BlockKind::mirror : BlockKind::must);
    if (must_.is_leaf_level(m)) continue;
    const auto n = decode_must_non_leaf(stored);
    for (std::uint64_t c = 0; c < fanout; ++c)
      if (!n.child_macs[c].is_sentinel()) todo.push_back({m + 1, idx * fanout + c, n.child_macs[c]});
  }
  sync();
}

}  // namespace iro

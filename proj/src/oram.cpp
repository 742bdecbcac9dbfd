#include "iro/oram.hpp"

#include "iro/detail/mix.hpp"
#include "oram_detail.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <sstream>

namespace iro {

namespace {

using detail::child_index;
using detail::level_of;
using detail::position_of;
using detail::to_block;
using detail::to_data;

constexpr std::uint64_t kNoTarget = ~std::uint64_t{0};
constexpr std::uint8_t kNoReplica = 0xf;
constexpr std::uint64_t kMustMacSalt = 0x4d55535400000000ull;

EcpPlan plan_from_entries(const std::vector<EcpEntry>& entries, std::size_t roffset, std::size_t count) {
  EcpPlan p;
  p.roffset = roffset;
  p.targets.assign(count, std::nullopt);
  for (std::size_t e = 0; e < entries.size() && e < count; ++e)
    if (entries[e].in_use) p.targets[e] = entries[e].address;
  return p;
}

}  // namespace

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::baseline: return "baseline";
    case Scheme::ri: return "ri";
    case Scheme::rim: return "rim";
    case Scheme::rimr: return "rimr";
    case Scheme::rimre: return "rimre";
  }
  return "?";
}

Scheme parse_scheme(const std::string& s) {
  for (auto k : {Scheme::baseline, Scheme::ri, Scheme::rim, Scheme::rimr, Scheme::rimre})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown scheme '" + s + "'");
}

SchemeFeatures SchemeFeatures::of(Scheme s) {
  SchemeFeatures f;
  f.macs = s != Scheme::baseline;
  f.must = s == Scheme::rim || s == Scheme::rimr || s == Scheme::rimre;
  f.replication = s == Scheme::rimr || s == Scheme::rimre;
  f.random_errors = s == Scheme::rimre;
  return f;
}

std::uint64_t OpCounts::total_reads() const { return std::accumulate(reads.begin(), reads.end(), std::uint64_t{0}); }
std::uint64_t OpCounts::total_writes() const { return std::accumulate(writes.begin(), writes.end(), std::uint64_t{0}); }

OpCounts& OpCounts::operator+=(const OpCounts& o) {
  for (std::size_t i = 0; i < kBlockKinds; ++i) {
    reads[i] += o.reads[i];
    writes[i] += o.writes[i];
  }
  return *this;
}

OpCounts operator-(OpCounts a, const OpCounts& b) {
  for (std::size_t i = 0; i < kBlockKinds; ++i) {
    a.reads[i] -= b.reads[i];
    a.writes[i] -= b.writes[i];
  }
  return a;
}

MustGeometry fit_must_geometry(std::uint32_t tree_levels, std::uint32_t cached_levels) {
  MustGeometry g;
  g.tree_levels = tree_levels;
  const std::uint32_t dram = tree_levels - cached_levels;
  g.nonleaf_span = 3;
  g.leaf_span = std::min<std::uint32_t>(5, std::max<std::uint32_t>(1, dram));
  const std::uint32_t rest = dram > g.leaf_span ? dram - g.leaf_span : 0;
  g.must_levels = 1 + (rest + g.nonleaf_span - 1) / g.nonleaf_span;
  while (g.coverage() > tree_levels && g.leaf_span > 1) --g.leaf_span;
  g.cached_must_levels = std::min<std::uint32_t>(2, g.must_levels - 1);
  g.validate();
  return g;
}

std::uint64_t OramConfig::capacity_blocks() const {
  return static_cast<std::uint64_t>(std::floor(real_utilization * Z * static_cast<double>(bucket_count())));
}

MustGeometry OramConfig::must_geometry() const {
  return must ? *must : fit_must_geometry(tree_levels, cached_levels);
}

void OramConfig::validate() const {
  if (tree_levels < 2 || tree_levels > 31) throw std::invalid_argument("tree_levels must be in [2, 31]");
  if (cached_levels >= tree_levels) throw std::invalid_argument("cached_levels must be below tree_levels");
  if (Z != kMaxRealSlots || Z + S != kSlotsPerBucket)
    throw std::invalid_argument("bucket layout fixes Z = 5 and S = 7");
  if (A == 0) throw std::invalid_argument("eviction rate A must be positive");
  if (stash_capacity == 0) throw std::invalid_argument("stash_capacity must be positive");
  if (!(stash_low < stash_high) || stash_high > 1.0 || stash_low <= 0.0)
    throw std::invalid_argument("stash thresholds must satisfy 0 < low < high <= 1");
  if (real_utilization <= 0.0 || real_utilization > 1.0) throw std::invalid_argument("real_utilization must be in (0, 1]");
  if (mac_units == 0) throw std::invalid_argument("mac_units must be positive");
}

std::string PhysicalLayout::describe() const {
  std::ostringstream os;
  os << "tree_buckets " << tree_buckets << "\n"
     << "spare_buckets " << spare_buckets << "\n"
     << "must_base " << must_base << "\n"
     << "must_slots " << must_slots << "\n"
     << "probe_base " << probe_base << "\n"
     << "total_blocks " << total_blocks << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

Controller::Controller(const OramConfig& cfg, Scheme scheme, std::uint64_t seed)
    : cfg_(cfg), scheme_(scheme), feat_(SchemeFeatures::of(scheme)), key_(Key::from_seed(seed ^ 0x6b65795f69726full)),
      rng_(seed), aux_rng_(detail::splitmix64(seed ^ 0x617578ull)), mac_pool_(cfg.mac_units, cfg.mac_latency),
      remap_(cfg.remap_capacity) {
  init(std::nullopt, seed);
}

Controller::Controller(const OramConfig& cfg, Scheme scheme, std::uint64_t seed, const DramGeometry& geometry)
    : cfg_(cfg), scheme_(scheme), feat_(SchemeFeatures::of(scheme)), key_(Key::from_seed(seed ^ 0x6b65795f69726full)),
      rng_(seed), aux_rng_(detail::splitmix64(seed ^ 0x617578ull)), mac_pool_(cfg.mac_units, cfg.mac_latency),
      remap_(cfg.remap_capacity) {
  init(geometry, seed);
}

void Controller::init(std::optional<DramGeometry> geometry, std::uint64_t seed) {
  cfg_.validate();
  must_ = cfg_.must_geometry();
  if (feat_.must) {
    must_.validate();
    if (must_.tree_levels != cfg_.tree_levels) throw std::invalid_argument("MUST geometry must match the tree height");
    if (must_.top_level() > cfg_.cached_levels)
      throw std::invalid_argument("MUST does not cover every DRAM-resident level");
  }

  layout_.tree_buckets = cfg_.bucket_count();
  layout_.spare_buckets = cfg_.remap_capacity;
  const std::uint64_t tree_blocks = (layout_.tree_buckets + layout_.spare_buckets) * kBlocksPerBucket;
  layout_.must_base = tree_blocks + (tree_blocks & 1);
  layout_.must_slots = feat_.must ? must_.dram_nodes() + cfg_.must_spare_nodes : 0;
  layout_.probe_base = layout_.must_base + 2 * layout_.must_slots;
  layout_.total_blocks = layout_.probe_base + 2;

  DramGeometry g = geometry ? *geometry : DramGeometry::fitting(layout_.total_blocks, 2);
  g.validate();
  if (g.channels != 2) throw std::invalid_argument("the controller expects two channels");
  if (g.capacity() < layout_.total_blocks) throw CapacityError("DRAM too small for the ORAM layout");
  dram_ = Dram(g, detail::splitmix64(seed ^ 0x6472616dull));
  channel_free_.assign(2, 0);

  cached_.resize((std::uint64_t{1} << cfg_.cached_levels) - 1);
  anchor_.assign(std::uint64_t{1} << cfg_.cached_levels, Mac54{});
  if (feat_.must) {
    must_cache_.resize(must_.level_base(must_.cached_must_levels));
    must_anchor_.assign(must_.nodes_at(must_.cached_must_levels), Mac54{});
  }
  next_error_tick_ = error_interval_;
}

void Controller::reseed(std::uint64_t seed) { rng_.seed(seed); }

std::uint64_t Controller::physical_bucket(std::uint64_t bucket) const {
  if (auto s = remap_.lookup(bucket)) return layout_.tree_buckets + *s;
  return bucket;
}

std::uint64_t Controller::must_block_index(std::uint64_t node_id, bool mirror) const {
  std::uint64_t slot;
  if (auto it = must_relocated_.find(node_id); it != must_relocated_.end())
    slot = must_.dram_nodes() + it->second;
  else
    slot = node_id - must_.level_base(must_.cached_must_levels);
  return layout_.must_base + 2 * slot + (mirror ? 1 : 0);
}

std::uint32_t Controller::bucket_level(std::uint64_t bucket) const { return level_of(bucket); }

std::uint64_t Controller::path_bucket(std::uint64_t leaf, std::uint32_t level) const {
  return (std::uint64_t{1} << level) - 1 + (leaf >> (cfg_.tree_levels - 1 - level));
}

std::uint64_t Controller::eviction_leaf(std::uint64_t evict_count) const {
  const std::uint32_t bits = cfg_.tree_levels - 1;
  const std::uint64_t g = evict_count & ((std::uint64_t{1} << bits) - 1);
  std::uint64_t r = 0;
  for (std::uint32_t i = 0; i < bits; ++i)
    if ((g >> i) & 1u) r |= std::uint64_t{1} << (bits - 1 - i);
  return r;
}

// --- accounting and timing --------------------------------------------------

Block576 Controller::read_raw(std::uint64_t index, BlockKind kind) {
  const auto p = static_cast<std::size_t>(phase_);
  const auto k = static_cast<std::size_t>(kind);
  ++stats_.phase[p].reads[k];
  ++stats_.total.reads[k];
  const auto ch = dram_.channel_of(index);
  const std::uint64_t t = std::max(channel_free_[ch], now_) + cfg_.block_cost;
  channel_free_[ch] = t;
  last_ready_ = t;
  pending_ = std::max(pending_, t);
  return dram_.read_block(index);
}

void Controller::write_raw(std::uint64_t index, const Block576& bits, BlockKind kind) {
  const auto p = static_cast<std::size_t>(phase_);
  const auto k = static_cast<std::size_t>(kind);
  ++stats_.phase[p].writes[k];
  ++stats_.total.writes[k];
  const auto ch = dram_.channel_of(index);
  channel_free_[ch] = std::max(channel_free_[ch], now_) + cfg_.block_cost;
  dram_.write_block(index, bits);
}

void Controller::mac_on_critical_path() { pending_ = std::max(pending_, mac_pool_.submit(last_ready_)); }
void Controller::mac_off_critical_path() { mac_pool_.submit(now_); }

void Controller::sync() {
  now_ = std::max(now_, pending_);
  stats_.ticks = now_;
}

// --- bucket content ------------------------------------------------------------

Block576 Controller::seal_metadata(std::uint64_t bucket, const BucketMetadata& m, VRSet vr) const {
  Block576 bits = encode_bucket_metadata(m);
  const std::size_t span = layout::kSensitiveEnd - layout::kSensitiveBegin;
  if (m.enc_ctr.value == 0) {
    for (std::size_t off = 0; off < span; off += 64)
      bits.put(layout::kSensitiveBegin + off, std::min<std::size_t>(64, span - off), 0);
  } else {
    const auto pad = pad512(key_, bucket, m.enc_ctr, kMetadataPadOffset);
    for (std::size_t off = 0; off < span; off += 64) {
      const std::size_t w = std::min<std::size_t>(64, span - off);
      const std::uint64_t mask = w == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << w) - 1;
      bits.put(layout::kSensitiveBegin + off, w, bits.get(layout::kSensitiveBegin + off, w) ^ (pad[off / 64] & mask));
    }
  }
  if (!feat_.must) put_inline_vrset(bits, vr);
  return bits;
}

BucketMetadata Controller::open_metadata(std::uint64_t bucket, const Block576& stored) const {
  Block576 bits = stored;
  const EncCtr ctr{stored.get(layout::kEncCtr, layout::kEncCtrBits)};
  if (ctr.value != 0) {
    const auto pad = pad512(key_, bucket, ctr, kMetadataPadOffset);
    const std::size_t span = layout::kSensitiveEnd - layout::kSensitiveBegin;
    for (std::size_t off = 0; off < span; off += 64) {
      const std::size_t w = std::min<std::size_t>(64, span - off);
      const std::uint64_t mask = w == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << w) - 1;
      bits.put(layout::kSensitiveBegin + off, w, bits.get(layout::kSensitiveBegin + off, w) ^ (pad[off / 64] & mask));
    }
  }
  BucketMetadata m = decode_bucket_metadata(bits);
  if (ctr.value == 0) {
    const auto fresh = BucketMetadata::empty();
    m.addresses = fresh.addresses;
    m.path_labels = fresh.path_labels;
    m.real_offsets = fresh.real_offsets;
    m.replica_meta_offset = kNoReplica;
  }
  if (!feat_.replication) {
    // The ECP area carries the inline VR set instead.
    m.fbit = false;
    m.roffset = 0;
    m.ecps = {};
  }
  return m;
}

Block576 Controller::seal_slot(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& plain,
                               MacDomain d) const {
  Block576 c = otp_crypt(key_, bucket, ctr, slot, plain);
  const std::uint32_t shard = shard_for_slot(physical_bucket(bucket), static_cast<std::uint8_t>(slot), ctr);
  const Mac54 mac = feat_.macs ? mac_data(key_, bucket * kBlocksPerBucket + slot, ctr, c, shard, d) : Mac54{};
  c.set_ecc_area(pack_ecc_area(mac, shard));
  return c;
}

Block576 Controller::open_slot(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& stored) const {
  Block576 p = otp_crypt(key_, bucket, ctr, slot, stored);
  p.clear_ecc_area();
  return p;
}

bool Controller::slot_mac_ok(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& stored,
                             MacDomain d) const {
  const auto ecc = unpack_ecc_area(stored.ecc_area());
  const std::uint32_t shard = shard_for_slot(physical_bucket(bucket), static_cast<std::uint8_t>(slot), ctr);
  if (ecc.partial_ctr != shard) return false;
  return mac_data(key_, bucket * kBlocksPerBucket + slot, ctr, stored, shard, d) == ecc.mac;
}

Block576 Controller::meta_replica_block(std::uint64_t bucket, const BucketMetadata& m) const {
  return seal_slot(bucket, m.replica_meta_offset, m.enc_ctr, encode_replica_metadata(m), MacDomain::metadata_replica);
}

Mac54 Controller::metadata_mac(std::uint64_t bucket, const Block576& stored) const {
  return mac_meta(key_, bucket * kBlocksPerBucket + kSlotsPerBucket, stored, MacDomain::metadata);
}

MacDomain Controller::slot_domain(const BucketMetadata& m, std::uint32_t slot) const {
  return feat_.replication && m.replica_meta_offset == slot ? MacDomain::metadata_replica : MacDomain::data;
}

std::array<Block576, kSlotsPerBucket> Controller::build_slots(std::uint64_t bucket, const BucketMetadata& m,
                                                              const std::array<Data, kMaxRealSlots>& reals) const {
  std::array<Block576, kSlotsPerBucket> slots;
  if (m.enc_ctr.value == 0) return slots;
  for (std::uint32_t s = 0; s < kSlotsPerBucket; ++s) slots[s] = seal_slot(bucket, s, m.enc_ctr, Block576{}, MacDomain::data);
  for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
    if (m.addresses[i] == kEmptyAddress) continue;
    slots[m.real_offsets[i]] = seal_slot(bucket, m.real_offsets[i], m.enc_ctr, to_block(reals[i]), MacDomain::data);
  }
  if (feat_.replication) {
    const auto plan = locate_replica(physical_bucket(bucket), m);
    if (!plan) throw std::logic_error("stored metadata has no feasible replica plan");
    for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
      if (m.addresses[i] == kEmptyAddress) continue;
      const auto r = static_cast<std::uint32_t>(plan->real_replicas[i]);
      slots[r] = seal_slot(bucket, r, m.enc_ctr, to_block(reals[i]), MacDomain::data);
    }
    slots[m.replica_meta_offset] = meta_replica_block(bucket, m);
  }
  return slots;
}

// --- metadata path -------------------------------------------------------------

Controller::Fetched Controller::fetch_metadata(std::uint64_t bucket, Mac54 expected) {
  Fetched f;
  f.bucket = bucket;
  f.expected = expected;
  const Block576 raw = read_raw(block_index(bucket, kSlotsPerBucket), BlockKind::metadata);
  f.stored = raw;
  if (feat_.replication && raw.bit(layout::kFbit)) {
    f.ecps = read_ecps(raw, EcpLayout::bucket());
    f.stored = apply_ecps(raw, f.ecps, 0);
  }
  bool ok = true;
  if (feat_.macs) {
    if (expected.is_sentinel()) {
      ok = f.stored.is_zero();
    } else {
      mac_on_critical_path();
      ok = metadata_mac(bucket, f.stored) == expected;
    }
  }
  if (!ok) {
    violation(bucket, level_of(bucket), false, "metadata MAC mismatch");
    if (!feat_.replication) throw IntegrityViolation("metadata of bucket " + std::to_string(bucket) + " failed verification");
    return recover_metadata(bucket, expected, raw);
  }
  f.meta = open_metadata(bucket, f.stored);
  return f;
}

std::vector<Controller::Fetched> Controller::fetch_path_metadata(std::uint64_t leaf) {
  std::vector<Fetched> path;
  path.reserve(cfg_.tree_levels - cfg_.cached_levels);
  for (std::uint32_t d = cfg_.cached_levels; d < cfg_.tree_levels; ++d) {
    const std::uint64_t b = path_bucket(leaf, d);
    const Mac54 expected = path.empty() ? anchor_[position_of(b)] : path.back().meta.child_macs[child_index(b)];
    path.push_back(fetch_metadata(b, expected));
  }
  return path;
}

Block576 Controller::read_slot(Fetched& f, std::uint32_t slot) {
  const Block576 raw = read_raw(block_index(f.bucket, slot), BlockKind::data);
  const Block576 stored =
      f.ecps.empty() ? raw : apply_ecps(raw, f.ecps, bucket_bit_address(static_cast<std::int32_t>(slot), 0));
  bool ok = true;
  if (feat_.macs) {
    if (f.meta.enc_ctr.value == 0) {
      ok = stored.is_zero();
    } else {
      mac_off_critical_path();
      ok = slot_mac_ok(f.bucket, slot, f.meta.enc_ctr, stored, slot_domain(f.meta, slot));
    }
  }
  if (!ok) {
    violation(f.bucket, level_of(f.bucket), false, "data MAC mismatch in slot " + std::to_string(slot));
    if (!feat_.replication)
      throw IntegrityViolation("slot " + std::to_string(slot) + " of bucket " + std::to_string(f.bucket) +
                               " failed verification");
    return recover_slot(f, slot, raw);
  }
  return stored;
}

std::vector<std::size_t> Controller::live_entries(const Fetched& f) const {
  std::vector<std::size_t> out;
  if (f.meta.enc_ctr.value == 0) return out;
  for (std::size_t i = 0; i < kMaxRealSlots; ++i)
    if (f.meta.addresses[i] != kEmptyAddress && f.vr.is_valid(f.meta.real_offsets[i])) out.push_back(i);
  return out;
}

std::array<std::uint8_t, kSlotsPerBucket> Controller::permute_bucket() {
  std::array<std::uint8_t, kSlotsPerBucket> p;
  std::iota(p.begin(), p.end(), std::uint8_t{0});
  std::shuffle(p.begin(), p.end(), rng_);
  return p;
}

void Controller::write_bucket(Fetched& f, const std::vector<std::pair<std::uint64_t, StashEntry>>& blocks) {
  if (blocks.size() > kMaxRealSlots) throw std::logic_error("too many real blocks for one bucket");
  const std::uint64_t b = f.bucket;

  std::optional<EcpPlan> plan;
  if (feat_.replication) {
    std::vector<std::uint32_t> faults = recorded_faults(f.ecps);
    if (auto it = pending_faults_.find(b); it != pending_faults_.end()) {
      faults.insert(faults.end(), it->second.begin(), it->second.end());
      pending_faults_.erase(it);
      ++stats_.ecp_allocations;
    }
    plan = allocate_ecp(EcpLayout::bucket(), faults, f.meta.roffset);
    if (!plan) {
      remap_.remap(b);  // throws ReliabilityAlarm once the spare area is exhausted
      ++stats_.remaps;
      plan = allocate_ecp(EcpLayout::bucket(), {}, 0);
    }
  }

  BucketMetadata m = BucketMetadata::empty();
  m.child_macs = f.meta.child_macs;
  m.enc_ctr = f.meta.enc_ctr.next();
  if (m.enc_ctr.value == 0) m.enc_ctr = EncCtr{1};
  std::array<Data, kMaxRealSlots> reals{};
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    m.addresses[i] = static_cast<std::uint32_t>(blocks[i].first);
    m.path_labels[i] = blocks[i].second.leaf;
    reals[i] = blocks[i].second.data;
  }

  const std::uint64_t phys = physical_bucket(b);
  SlotRejector reject;
  if (plan && plan->used() > 0) {
    std::array<bool, kSlotsPerBucket> bad{};
    for (const auto& t : plan->targets) {
      if (!t) continue;
      const auto s = bucket_address_slot(*t);
      if (s >= 0 && s < static_cast<std::int32_t>(kSlotsPerBucket)) bad[static_cast<std::size_t>(s)] = true;
    }
    reject = [bad](std::uint8_t s) { return bad[s]; };
  }
  for (int attempt = 0;; ++attempt) {
    const auto perm = permute_bucket();
    for (std::size_t i = 0; i < blocks.size(); ++i) m.real_offsets[i] = perm[i];
    if (!feat_.replication) {
      m.replica_meta_offset = kNoReplica;
      break;
    }
    auto rp = plan_replicas(phys, m.real_offsets, m.addresses, reject);
    if (rp) {
      m.replica_meta_offset = static_cast<std::uint8_t>(rp->meta_replica);
      break;
    }
    if (attempt > 256) throw ReliabilityAlarm("no replica placement for bucket " + std::to_string(b));
  }
  if (feat_.replication) {
    // Targets decide the replica placement; fields are embedded at commit.
    for (std::size_t e = 0; e < plan->targets.size(); ++e) {
      EcpEntry entry;
      if (plan->targets[e]) entry = {*plan->targets[e], false, true};
      m.ecps[physical_slot(EcpLayout::bucket(), e, plan->roffset)] = encode_ecp_entry(EcpLayout::bucket(), entry);
    }
    m.roffset = static_cast<std::uint8_t>(plan->roffset);
    m.fbit = plan->used() > 0;
  }

  f.meta = m;
  f.vr = VRSet::fresh();
  f.plan = plan;
  f.slots = build_slots(b, m, reals);
  f.rewritten = true;
  for (std::uint32_t s = 0; s < kSlotsPerBucket; ++s) {
    if (feat_.replication && s == m.replica_meta_offset) continue;  // written with the metadata
    write_raw(block_index(b, s), f.slots[s], BlockKind::data);
    if (feat_.macs) mac_off_critical_path();
  }
  if (written_.insert(b).second) written_list_.push_back(b);
}

Mac54 Controller::commit_metadata(Fetched& f) {
  const std::uint64_t b = f.bucket;
  Block576 bits = seal_metadata(b, f.meta, f.vr);
  if (feat_.replication) {
    const auto l = EcpLayout::bucket();
    EcpPlan plan = f.plan ? *f.plan : plan_from_entries(f.ecps, f.meta.roffset, l.entry_count);
    std::function<bool(std::uint32_t)> external;
    if (f.rewritten) {
      external = [&f](std::uint32_t addr) {
        const auto s = bucket_address_slot(addr);
        return f.slots[static_cast<std::size_t>(s)].bit(addr % kBlockBits);
      };
    } else {
      external = [&f](std::uint32_t addr) {
        for (const auto& e : f.ecps)
          if (e.in_use && e.address == addr) return e.value;
        return false;
      };
    }
    embed_ecps(bits, l, plan, external);
    f.ecps = bits.bit(layout::kFbit) ? read_ecps(bits, l) : std::vector<EcpEntry>{};
    const auto decoded = decode_bucket_metadata(bits);
    f.meta.fbit = decoded.fbit;
    f.meta.roffset = decoded.roffset;
    f.meta.ecps = decoded.ecps;
    f.plan = plan;
    if (f.meta.enc_ctr.value != 0) {
      const Block576 rep = meta_replica_block(b, f.meta);
      if (f.rewritten) f.slots[f.meta.replica_meta_offset] = rep;
      write_raw(block_index(b, f.meta.replica_meta_offset), rep, BlockKind::data);
      mac_off_critical_path();
    }
  }
  write_raw(block_index(b, kSlotsPerBucket), bits, BlockKind::metadata);
  f.stored = bits;
  if (!feat_.macs) return Mac54{};
  mac_off_critical_path();
  return metadata_mac(b, bits);
}

void Controller::commit_path(std::vector<Fetched>& path, std::optional<MustPathState>& ms) {
  if (path.empty()) {
    if (ms) write_must_path(*ms);
    return;
  }
  // Which metadata blocks change: everything without a MUST (VR sets are
  // inline), otherwise rewritten buckets and their ancestors.
  std::vector<bool> need(path.size(), false);
  bool below = false;
  for (std::size_t i = path.size(); i-- > 0;) {
    need[i] = !feat_.must || path[i].rewritten || below;
    below = need[i];
  }
  // With a MUST a Read Path writes no metadata; rewrites forced by a
  // reshuffle are charged to the reshuffle.
  std::optional<PhaseGuard> charge;
  if (feat_.must && phase_ == Phase::read_path && below) charge.emplace(this, Phase::reshuffle);
  if (feat_.replication) {
    // A bucket still at EncCtr 0 has no replica; give it one before its
    // metadata starts carrying child MACs.
    for (std::size_t i = path.size(); i-- > 0;)
      if (need[i] && !path[i].rewritten && path[i].meta.enc_ctr.value == 0) write_bucket(path[i], {});
  }
  Mac54 child{};
  bool child_changed = false;
  for (std::size_t i = path.size(); i-- > 0;) {
    auto& f = path[i];
    if (child_changed) f.meta.child_macs[child_index(path[i + 1].bucket)] = child;
    if (need[i]) {
      child = commit_metadata(f);
      child_changed = true;
    } else {
      child_changed = false;
    }
  }
  if (child_changed) anchor_[position_of(path.front().bucket)] = child;
  charge.reset();
  if (ms) {
    for (const auto& f : path) set_must_vrset(*ms, level_of(f.bucket), position_of(f.bucket), f.vr);
    write_must_path(*ms);
  }
}

// --- VR sets and the MUST ----------------------------------------------------------

Mac54 Controller::must_node_mac(std::uint64_t id, const Block576& stored) const {
  return mac_meta(key_, kMustMacSalt | id, stored, MacDomain::must_node);
}

const EcpLayout& Controller::must_ecp_layout(std::uint32_t must_level) const {
  static const EcpLayout leaf = EcpLayout::must_leaf();
  static const EcpLayout non_leaf = EcpLayout::must_non_leaf();
  return must_.is_leaf_level(must_level) ? leaf : non_leaf;
}

Controller::MustNodeState Controller::decode_must_state(std::uint64_t id, std::uint32_t must_level,
                                                        const Block576& stored) const {
  MustNodeState n;
  n.id = id;
  n.must_level = must_level;
  n.node_index = id - must_.level_base(must_level);
  n.leaf = must_.is_leaf_level(must_level);
  n.stored = stored;
  if (n.leaf)
    n.lf = decode_must_leaf(stored, must_.ipoffset_count());
  else
    n.nl = decode_must_non_leaf(stored);
  const auto& l = must_ecp_layout(must_level);
  if (feat_.replication && stored.bit(0)) n.ecps = read_ecps(stored, l);
  return n;
}

Controller::MustNodeState Controller::fetch_must_node(std::uint64_t id, std::uint32_t must_level, Mac54 expected,
                                                      bool mirror) {
  const std::uint64_t idx = must_block_index(id, mirror);
  const Block576 raw = read_raw(idx, mirror ? BlockKind::mirror : BlockKind::must);
  Block576 stored = raw;
  if (feat_.replication && raw.bit(0)) stored = repair_host(raw, must_ecp_layout(must_level));
  bool ok;
  if (expected.is_sentinel()) {
    ok = stored.is_zero();
  } else {
    mac_on_critical_path();
    ok = must_node_mac(id, stored) == expected;
  }
  if (!ok) {
    violation(id, must_level, true, "MUST node MAC mismatch");
    if (!feat_.replication) throw IntegrityViolation("MUST node " + std::to_string(id) + " failed verification");
    return recover_must_node(id, must_level, expected, mirror, raw);
  }
  return decode_must_state(id, must_level, stored);
}

Controller::MustPathState Controller::fetch_must_path(std::uint64_t leaf) {
  MustPathState st;
  st.path = pmeta_to_must_path(must_, leaf);
  const bool mirror = feat_.replication && must_read_mirror_;
  if (feat_.replication) must_read_mirror_ = !must_read_mirror_;
  for (std::uint32_t m = must_.cached_must_levels; m < must_.must_levels; ++m) {
    const auto& step = st.path.steps[m];
    const std::uint64_t fanout = std::uint64_t{1} << must_.nonleaf_span;
    const Mac54 expected = st.nodes.empty() ? must_anchor_[step.node_index]
                                            : st.nodes.back().nl.child_macs[step.node_index % fanout];
    st.nodes.push_back(fetch_must_node(step.node_id, m, expected, mirror));
  }
  return st;
}

VRSet& Controller::must_vr_ref(MustPathState& st, std::uint32_t level, std::uint64_t pos) {
  const auto loc = locate_set(must_, level, pos);
  if (loc.must_level < must_.cached_must_levels)
    return must_cache_[must_.level_base(loc.must_level) + loc.node_index].vr[loc.set_index];
  auto& n = st.nodes[loc.must_level - must_.cached_must_levels];
  if (n.node_index != loc.node_index) throw std::logic_error("bucket is not on the fetched MUST path");
  return n.leaf ? n.lf.vr[loc.set_index] : n.nl.vr[loc.set_index];
}

void Controller::set_must_vrset(MustPathState& st, std::uint32_t level, std::uint64_t pos, VRSet vr) {
  must_vr_ref(st, level, pos) = vr;
}

void Controller::write_must_path(MustPathState& st) {
  Mac54 child{};
  const std::uint64_t fanout = std::uint64_t{1} << must_.nonleaf_span;
  for (std::size_t i = st.nodes.size(); i-- > 0;) {
    auto& n = st.nodes[i];
    if (i + 1 < st.nodes.size()) n.nl.child_macs[st.nodes[i + 1].node_index % fanout] = child;
    if (n.leaf) n.lf.ipoffsets = st.path.ipoffsets;
    Block576 bits = n.leaf ? encode_must_node(n.lf) : encode_must_node(n.nl);
    if (feat_.replication) {
      const auto& l = must_ecp_layout(n.must_level);
      std::vector<std::uint32_t> faults = recorded_faults(n.ecps);
      const std::size_t roffset = bits.get(l.roffset_offset, l.roffset_bits);
      if (auto it = pending_must_faults_.find(n.id); it != pending_must_faults_.end()) {
        faults.insert(faults.end(), it->second.begin(), it->second.end());
        pending_must_faults_.erase(it);
        ++stats_.ecp_allocations;
      }
      auto plan = allocate_ecp(l, faults, roffset);
      if (!plan) {
        if (must_relocated_.size() >= cfg_.must_spare_nodes)
          throw ReliabilityAlarm("no spare MUST node left for node " + std::to_string(n.id));
        must_relocated_[n.id] = must_relocated_.size();
        ++stats_.must_relocations;
        plan = allocate_ecp(l, {}, 0);
      }
      embed_ecps(bits, l, *plan);
      n.ecps = bits.bit(0) ? read_ecps(bits, l) : std::vector<EcpEntry>{};
      if (n.leaf) {
        const auto d = decode_must_leaf(bits, must_.ipoffset_count());
        n.lf.fbit = d.fbit, n.lf.roffset = d.roffset, n.lf.ecps = d.ecps;
      } else {
        const auto d = decode_must_non_leaf(bits);
        n.nl.fbit = d.fbit, n.nl.roffset = d.roffset, n.nl.ecps = d.ecps;
      }
    }
    n.stored = bits;
    write_raw(must_block_index(n.id, false), bits, BlockKind::must);
    if (feat_.replication) write_raw(must_block_index(n.id, true), bits, BlockKind::mirror);
    mac_off_critical_path();
    child = must_node_mac(n.id, bits);
  }
  if (!st.nodes.empty()) must_anchor_[st.nodes.front().node_index] = child;
}

void Controller::load_vrsets(std::vector<Fetched>& path, std::uint64_t leaf, std::optional<MustPathState>& ms) {
  if (!feat_.must) {
    for (auto& f : path) f.vr = get_inline_vrset(f.stored);
    return;
  }
  ms = fetch_must_path(leaf);
  for (auto& f : path) f.vr = must_vr_ref(*ms, level_of(f.bucket), position_of(f.bucket));
}

// --- protocol ------------------------------------------------------------------------

Data Controller::access(std::uint64_t addr, Op op, const Data* data) {
  if (op == Op::write && !data) throw std::invalid_argument("write access without data");
  if (addr >= kEmptyAddress) throw std::out_of_range("logical address does not fit the 32-bit address field");
  ++stats_.accesses;
  ++access_count_;
  const std::uint64_t leaves = cfg_.leaf_count();
  const std::uint64_t u_current = rng_();
  const std::uint64_t u_next = rng_();
  auto pm = posmap_.find(addr);
  const auto leaf = pm != posmap_.end() ? pm->second : static_cast<std::uint32_t>(u_current % leaves);
  const auto next_leaf = static_cast<std::uint32_t>(u_next % leaves);

  read_path(leaf, addr);
  auto it = stash_.find(addr);
  if (it == stash_.end()) it = stash_.emplace(addr, StashEntry{}).first;  // first touch reads as zero
  const Data result = it->second.data;
  if (op == Op::write) it->second.data = *data;
  it->second.leaf = next_leaf;
  posmap_[addr] = next_leaf;
  stats_.stash_peak = std::max<std::uint64_t>(stats_.stash_peak, stash_.size());

  after_read_path();
  relieve_stash_pressure();
  if (feat_.random_errors) inject_random_errors();
  if (stash_.size() > cfg_.stash_capacity) throw StashOverflow("stash exceeded its capacity");
  return result;
}

void Controller::dummy_access() {
  ++stats_.dummy_accesses;
  read_path(rng_() % cfg_.leaf_count(), kNoTarget);
  after_read_path();
}

void Controller::after_read_path() {
  if (++read_path_count_ % cfg_.A == 0) evict_path();
}

void Controller::relieve_stash_pressure() {
  const auto high = static_cast<std::size_t>(cfg_.stash_high * static_cast<double>(cfg_.stash_capacity));
  const auto low = static_cast<std::size_t>(cfg_.stash_low * static_cast<double>(cfg_.stash_capacity));
  if (stash_.size() <= high) return;
  std::size_t guard = 0;
  while (stash_.size() >= low) {
    dummy_access();
    if (++guard > 100000) throw StashOverflow("stash pressure relief made no progress");
  }
}

void Controller::read_path(std::uint64_t leaf, std::uint64_t target) {
  auto guard = enter(Phase::read_path);
  ++stats_.read_paths;
  for (std::uint32_t d = 0; d < cfg_.cached_levels; ++d) {
    auto& cb = cached_[path_bucket(leaf, d)];
    if (auto it = cb.find(target); it != cb.end()) {
      stash_.insert(*it);
      cb.erase(it);
    }
  }
  auto path = fetch_path_metadata(leaf);
  std::optional<MustPathState> ms;
  load_vrsets(path, leaf, ms);
  sync();

  std::vector<std::pair<std::uint64_t, StashEntry>> moved;
  for (auto& f : path) {
    const std::uint64_t u = rng_();
    const auto live = live_entries(f);
    std::int32_t slot = -1, entry = -1;
    for (auto i : live)
      if (f.meta.addresses[i] == target) slot = f.meta.real_offsets[i], entry = static_cast<std::int32_t>(i);
    if (slot < 0) {
      std::vector<std::uint32_t> dummies;
      for (std::uint32_t s = 0; s < kSlotsPerBucket; ++s) {
        if (!f.vr.is_valid(s)) continue;
        const bool real = std::any_of(live.begin(), live.end(), [&](std::size_t i) { return f.meta.real_offsets[i] == s; });
        if (!real) dummies.push_back(s);
      }
      if (!dummies.empty()) {
        slot = static_cast<std::int32_t>(dummies[u % dummies.size()]);
      } else {
        // Only other real blocks are left valid: read one and keep it in the stash.
        if (live.empty()) throw std::logic_error("bucket has no valid slot left");
        const auto i = live[u % live.size()];
        slot = f.meta.real_offsets[i];
        entry = static_cast<std::int32_t>(i);
        ++stats_.fallback_reads;
      }
    }
    const Block576 stored = read_slot(f, static_cast<std::uint32_t>(slot));
    if (entry >= 0) {
      const auto e = static_cast<std::size_t>(entry);
      moved.push_back({f.meta.addresses[e],
                       {f.meta.path_labels[e], to_data(open_slot(f.bucket, static_cast<std::uint32_t>(slot), f.meta.enc_ctr, stored))}});
    }
    f.vr.consume(static_cast<std::size_t>(slot));
  }
  sync();
  for (auto& [a, e] : moved) stash_[a] = e;

  std::vector<std::size_t> reshuffle;
  for (std::size_t i = path.size(); i-- > 0;) {
    const bool full = path[i].vr.read_ctr >= cfg_.S;
    if (full) ++stats_.early_reshuffles;
    if (full || pending_faults_.count(path[i].bucket)) reshuffle.push_back(i);
  }
  if (!reshuffle.empty()) reshuffle_buckets(path, reshuffle);
  commit_path(path, ms);
}

std::vector<std::pair<std::uint64_t, Controller::StashEntry>> Controller::read_valid_blocks(Fetched& f) {
  // Z reads per bucket: every live real block, then random valid dummies.
  std::array<std::uint64_t, kMaxRealSlots> u;
  for (auto& x : u) x = rng_();
  const auto live = live_entries(f);
  std::vector<std::pair<std::uint64_t, StashEntry>> out;
  std::vector<std::uint32_t> dummies;
  for (std::uint32_t s = 0; s < kSlotsPerBucket; ++s) {
    if (!f.vr.is_valid(s)) continue;
    const bool real = std::any_of(live.begin(), live.end(), [&](std::size_t i) { return f.meta.real_offsets[i] == s; });
    if (!real) dummies.push_back(s);
  }
  for (auto i : live) {
    const std::uint32_t s = f.meta.real_offsets[i];
    const Block576 stored = read_slot(f, s);
    out.push_back({f.meta.addresses[i], {f.meta.path_labels[i], to_data(open_slot(f.bucket, s, f.meta.enc_ctr, stored))}});
  }
  for (std::size_t k = live.size(); k < cfg_.Z && !dummies.empty(); ++k) {
    const std::size_t j = u[k] % dummies.size();
    read_slot(f, dummies[j]);
    dummies.erase(dummies.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

void Controller::reshuffle_buckets(std::vector<Fetched>& path, const std::vector<std::size_t>& which) {
  auto guard = enter(Phase::reshuffle);
  // All reads first: DRAM stays consistent until the writes begin.
  std::vector<std::vector<std::pair<std::uint64_t, StashEntry>>> contents;
  for (auto i : which) contents.push_back(read_valid_blocks(path[i]));
  sync();
  for (std::size_t k = 0; k < which.size(); ++k) {
    auto& f = path[which[k]];
    if (pending_faults_.count(f.bucket)) ++stats_.fault_reshuffles;
    auto& blocks = contents[k];
    std::sort(blocks.begin(), blocks.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    write_bucket(f, blocks);
  }
}

void Controller::evict_path() {
  auto guard = enter(Phase::evict);
  ++stats_.evictions;
  const std::uint64_t leaf = eviction_leaf(evict_count_++);
  const std::uint32_t L = cfg_.tree_levels;

  auto path = fetch_path_metadata(leaf);
  std::optional<MustPathState> ms;
  load_vrsets(path, leaf, ms);
  sync();
  std::vector<std::vector<std::pair<std::uint64_t, StashEntry>>> contents;
  for (auto& f : path) contents.push_back(read_valid_blocks(f));
  sync();

  for (std::uint32_t d = 0; d < cfg_.cached_levels; ++d) {
    auto& cb = cached_[path_bucket(leaf, d)];
    for (auto& kv : cb) stash_.insert(kv);
    cb.clear();
  }
  for (auto& c : contents)
    for (auto& kv : c) stash_[kv.first] = kv.second;
  stats_.stash_peak = std::max<std::uint64_t>(stats_.stash_peak, stash_.size());

  // Greedy placement, deepest bucket first, smaller addresses first.
  std::vector<std::vector<std::uint64_t>> deepest(L);
  for (const auto& [addr, e] : stash_) {
    const std::uint64_t x = e.leaf ^ leaf;
    deepest[L - 1 - static_cast<std::uint32_t>(std::bit_width(x))].push_back(addr);
  }
  std::vector<std::vector<std::pair<std::uint64_t, StashEntry>>> assigned(L);
  std::set<std::uint64_t> pending;
  for (std::uint32_t d = L; d-- > 0;) {
    pending.insert(deepest[d].begin(), deepest[d].end());
    while (!pending.empty() && assigned[d].size() < cfg_.Z) {
      const auto a = *pending.begin();
      pending.erase(pending.begin());
      auto it = stash_.find(a);
      assigned[d].push_back(*it);
      stash_.erase(it);
    }
  }

  for (std::uint32_t d = 0; d < cfg_.cached_levels; ++d) {
    auto& cb = cached_[path_bucket(leaf, d)];
    for (auto& kv : assigned[d]) cb.insert(kv);
  }
  for (std::size_t i = path.size(); i-- > 0;) write_bucket(path[i], assigned[cfg_.cached_levels + i]);
  commit_path(path, ms);
}

void Controller::inject_random_errors() {
  while (now_ >= next_error_tick_) {
    next_error_tick_ += error_interval_;
    if (written_list_.empty()) continue;
    const std::uint64_t b = written_list_[aux_rng_() % written_list_.size()];
    const auto k = static_cast<std::uint32_t>(aux_rng_() % kBlocksPerBucket);
    const auto bit = static_cast<std::uint32_t>(aux_rng_() % kBlockBits);
    FaultRecord r;
    r.kind = FaultKind::transient;
    r.granularity = FaultGranularity::bit;
    r.location = map_address(block_index(b, k), dram_.geometry());
    r.bit = bit;
    dram_.inject_fault(r);
    ++stats_.injected_errors;
  }
}

// --- introspection ----------------------------------------------------------------

std::optional<std::uint32_t> Controller::leaf_of(std::uint64_t addr) const {
  if (auto it = posmap_.find(addr); it != posmap_.end()) return it->second;
  return std::nullopt;
}

Block576 Controller::peek_stored_metadata(std::uint64_t bucket, std::vector<EcpEntry>* ecps) const {
  Block576 raw = dram_.peek(block_index(bucket, kSlotsPerBucket));
  if (feat_.replication && raw.bit(layout::kFbit)) {
    auto e = read_ecps(raw, EcpLayout::bucket());
    raw = apply_ecps(raw, e, 0);
    if (ecps) *ecps = std::move(e);
  }
  return raw;
}

std::optional<BucketMetadata> Controller::peek_metadata(std::uint64_t bucket) const {
  if (level_of(bucket) < cfg_.cached_levels) return std::nullopt;
  const Block576 stored = peek_stored_metadata(bucket, nullptr);
  if (stored.is_zero()) return std::nullopt;
  return open_metadata(bucket, stored);
}

VRSet Controller::peek_vrset(std::uint64_t bucket) const {
  if (!feat_.must) return get_inline_vrset(peek_stored_metadata(bucket, nullptr));
  const auto loc = locate_set(must_, level_of(bucket), position_of(bucket));
  if (loc.must_level < must_.cached_must_levels)
    return must_cache_[must_.level_base(loc.must_level) + loc.node_index].vr[loc.set_index];
  const std::uint64_t id = must_.level_base(loc.must_level) + loc.node_index;
  Block576 raw = dram_.peek(must_block_index(id, false));
  if (feat_.replication && raw.bit(0)) raw = repair_host(raw, must_ecp_layout(loc.must_level));
  if (must_.is_leaf_level(loc.must_level)) return decode_must_leaf(raw, must_.ipoffset_count()).vr[loc.set_index];
  return decode_must_non_leaf(raw).vr[loc.set_index];
}

std::vector<VRSet> Controller::peek_vrsets(std::uint64_t leaf) const {
  std::vector<VRSet> out;
  for (std::uint32_t d = cfg_.cached_levels; d < cfg_.tree_levels; ++d) out.push_back(peek_vrset(path_bucket(leaf, d)));
  return out;
}

std::vector<std::uint64_t> Controller::written_buckets() const {
  std::vector<std::uint64_t> v(written_list_);
  std::sort(v.begin(), v.end());
  return v;
}

bool Controller::check_path_invariant(std::string* why) const {
  auto fail = [&](const std::string& s) {
    if (why) *why = s;
    return false;
  };
  std::unordered_map<std::uint64_t, std::uint64_t> where;  // addr -> bucket (or ~0 for stash)
  for (const auto& [a, e] : stash_) where[a] = kNoTarget;
  for (std::uint64_t b = 0; b < cached_.size(); ++b)
    for (const auto& [a, e] : cached_[b])
      if (!where.emplace(a, b).second) return fail("address " + std::to_string(a) + " held twice");
  for (auto b : written_list_) {
    const auto m = peek_metadata(b);
    if (!m || m->enc_ctr.value == 0) continue;
    const VRSet vr = peek_vrset(b);
    for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
      if (m->addresses[i] == kEmptyAddress || !vr.is_valid(m->real_offsets[i])) continue;
      if (!where.emplace(m->addresses[i], b).second)
        return fail("address " + std::to_string(m->addresses[i]) + " held twice");
      if (m->path_labels[i] != posmap_.at(m->addresses[i]))
        return fail("stale label for address " + std::to_string(m->addresses[i]));
    }
  }
  for (const auto& [a, leaf] : posmap_) {
    auto it = where.find(a);
    if (it == where.end()) return fail("address " + std::to_string(a) + " lost");
    if (it->second == kNoTarget) continue;
    if (path_bucket(leaf, level_of(it->second)) != it->second)
      return fail("address " + std::to_string(a) + " off its path");
  }
  if (where.size() != posmap_.size()) return fail("unmapped block present");
  return true;
}

bool Controller::check_channel_disjointness(std::string* why) const {
  if (!feat_.replication) return true;
  for (auto b : written_list_) {
    const auto m = peek_metadata(b);
    if (!m || m->enc_ctr.value == 0) continue;
    const std::uint64_t phys = physical_bucket(b);
    const auto plan = locate_replica(phys, *m);
    if (!plan || plan->meta_replica != static_cast<std::int8_t>(m->replica_meta_offset)) {
      if (why) *why = "bucket " + std::to_string(b) + ": replica plan mismatch";
      return false;
    }
    if (slot_channel(phys, plan->meta_replica) == meta_channel(phys)) {
      if (why) *why = "bucket " + std::to_string(b) + ": metadata replica shares a channel";
      return false;
    }
    for (std::size_t i = 0; i < kMaxRealSlots; ++i) {
      if (m->addresses[i] == kEmptyAddress) continue;
      if (slot_channel(phys, plan->real_replicas[i]) == slot_channel(phys, m->real_offsets[i])) {
        if (why) *why = "bucket " + std::to_string(b) + ": replica shares a channel";
        return false;
      }
    }
  }
  return true;
}

bool Controller::check_mirror_equality(std::string* why) const {
  if (!feat_.replication) return true;
  for (std::uint32_t m = must_.cached_must_levels; m < must_.must_levels; ++m) {
    const auto& l = must_ecp_layout(m);
    for (std::uint64_t i = 0; i < must_.nodes_at(m); ++i) {
      const std::uint64_t id = must_.level_base(m) + i;
      Block576 p = dram_.peek(must_block_index(id, false));
      Block576 q = dram_.peek(must_block_index(id, true));
      if (p.bit(0)) p = repair_host(p, l);
      if (q.bit(0)) q = repair_host(q, l);
      if (p != q) {
        if (why) *why = "MUST node " + std::to_string(id) + " differs from its mirror";
        return false;
      }
    }
  }
  return true;
}

}  // namespace iro

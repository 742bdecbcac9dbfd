#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "iro/codec.hpp"
#include "iro/crypto.hpp"
#include "iro/dram.hpp"
#include "iro/ecp.hpp"
#include "iro/must.hpp"
#include "iro/replication.hpp"

namespace iro {

enum class Scheme { baseline, ri, rim, rimr, rimre };
std::string to_string(Scheme s);
Scheme parse_scheme(const std::string& s);

struct SchemeFeatures {
  bool macs = false;
  bool must = false;
  bool replication = false;  // replicas, mirrored MUST, ECP repair
  bool random_errors = false;
  static SchemeFeatures of(Scheme s);
};

struct OramConfig {
  std::uint32_t tree_levels = 23;
  std::uint32_t cached_levels = 7;
  std::uint32_t Z = 5;
  std::uint32_t S = 7;
  std::uint32_t A = 5;
  std::size_t stash_capacity = 8192;
  double real_utilization = 0.8;
  double stash_high = 0.9;
  double stash_low = 0.75;
  std::uint64_t block_cost = 40;  // latency-proxy ticks per block transfer
  std::size_t mac_units = 4;
  std::uint64_t mac_latency = 80;
  std::size_t remap_capacity = 1084;
  std::size_t must_spare_nodes = 64;
  std::optional<MustGeometry> must;  // derived from the tree when unset

  std::uint64_t bucket_count() const { return (std::uint64_t{1} << tree_levels) - 1; }
  std::uint64_t leaf_count() const { return std::uint64_t{1} << (tree_levels - 1); }
  // Logical blocks addressable at the configured real-slot utilization.
  std::uint64_t capacity_blocks() const;
  MustGeometry must_geometry() const;
  void validate() const;
};

// MUST shape for a tree: leaf MUS of up to 5 levels, 3-level non-leaf MUS,
// enough MUST levels to cover every DRAM-resident level.
MustGeometry fit_must_geometry(std::uint32_t tree_levels, std::uint32_t cached_levels);

using Data = std::array<std::uint64_t, 8>;
enum class Op { read, write };

enum class BlockKind : std::uint8_t { metadata, data, must, mirror };
enum class Phase : std::uint8_t { read_path, evict, reshuffle, recovery, probe };
inline constexpr std::size_t kBlockKinds = 4;
inline constexpr std::size_t kPhases = 5;

struct OpCounts {
  std::array<std::uint64_t, kBlockKinds> reads{};
  std::array<std::uint64_t, kBlockKinds> writes{};
  std::uint64_t total_reads() const;
  std::uint64_t total_writes() const;
  OpCounts& operator+=(const OpCounts& o);
  friend OpCounts operator-(OpCounts a, const OpCounts& b);
  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

struct ViolationEvent {
  std::uint64_t access = 0;
  std::uint64_t id = 0;  // bucket id, or MUST node id
  std::uint32_t level = 0;
  bool must_node = false;
  std::string cause;
};

struct RecoveryEvent {
  int kind = 0;  // 1, 2, 3 for the three cases; 4 for a MUST mirror repair
  std::uint64_t id = 0;
  std::uint64_t blocks_fetched = 0;
  std::uint64_t mac_trials = 0;
  bool success = false;
  std::optional<FaultClass> fault;
};

struct ControllerStats {
  std::array<OpCounts, kPhases> phase{};
  OpCounts total;
  std::uint64_t accesses = 0;
  std::uint64_t read_paths = 0;
  std::uint64_t dummy_accesses = 0;
  std::uint64_t evictions = 0;
  std::uint64_t early_reshuffles = 0;
  std::uint64_t fault_reshuffles = 0;
  std::uint64_t stash_peak = 0;
  std::uint64_t violations = 0;
  std::array<std::uint64_t, 5> recoveries{};  // indexed by RecoveryEvent::kind
  std::uint64_t transient_faults = 0;
  std::uint64_t permanent_faults = 0;
  std::uint64_t device_faults = 0;
  std::uint64_t ecp_allocations = 0;
  std::uint64_t remaps = 0;
  std::uint64_t must_relocations = 0;
  std::uint64_t fallback_reads = 0;
  std::uint64_t injected_errors = 0;
  std::uint64_t ticks = 0;
  double early_reshuffle_ratio() const {
    return read_paths ? static_cast<double>(early_reshuffles) / static_cast<double>(read_paths) : 0.0;
  }
};

// A MAC mismatch that recovery could not explain as a hardware error.
class IntegrityViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lost data beyond the fault model (e.g. both channels failed).
class UnrecoverableFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StashOverflow : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Physical placement: tree buckets, spare buckets for remapping, the MUST
// (primary at even, mirror at odd indices), spare MUST nodes, probe blocks.
struct PhysicalLayout {
  std::uint64_t tree_buckets = 0;
  std::uint64_t spare_buckets = 0;
  std::uint64_t must_base = 0;
  std::uint64_t must_slots = 0;  // DRAM-resident nodes plus spares
  std::uint64_t probe_base = 0;
  std::uint64_t total_blocks = 0;
  std::string describe() const;
};

class Controller {
 public:
  Controller(const OramConfig& cfg, Scheme scheme, std::uint64_t seed);
  Controller(const OramConfig& cfg, Scheme scheme, std::uint64_t seed, const DramGeometry& geometry);

  Data access(std::uint64_t addr, Op op, const Data* data = nullptr);
  Data read(std::uint64_t addr) { return access(addr, Op::read); }
  void write(std::uint64_t addr, const Data& d) { access(addr, Op::write, &d); }
  // Random-leaf Read Path plus eviction; used for stash pressure relief.
  void dummy_access();

  // Case 3: swap in a fresh DIMM for `channel` and rebuild it from the other.
  void recover_channel(std::uint32_t channel);

  const OramConfig& config() const { return cfg_; }
  Scheme scheme() const { return scheme_; }
  const SchemeFeatures& features() const { return feat_; }
  const MustGeometry& must_geometry() const { return must_; }
  const PhysicalLayout& layout() const { return layout_; }
  Dram& dram() { return dram_; }
  const Dram& dram() const { return dram_; }
  const ControllerStats& stats() const { return stats_; }
  const std::vector<ViolationEvent>& violations() const { return violations_; }
  const std::vector<RecoveryEvent>& recoveries() const { return recoveries_; }
  const RemapTable& remap_table() const { return remap_; }
  std::size_t stash_size() const { return stash_.size(); }
  const MacUnitPool& mac_pool() const { return mac_pool_; }

  // Block index helpers (logical bucket id, slot 0..11, 12 = metadata).
  std::uint64_t physical_bucket(std::uint64_t bucket) const;
  std::uint64_t block_index(std::uint64_t bucket, std::uint32_t k) const {
    return physical_bucket(bucket) * kBlocksPerBucket + k;
  }
  std::uint64_t must_block_index(std::uint64_t node_id, bool mirror) const;
  std::uint32_t bucket_level(std::uint64_t bucket) const;
  std::uint64_t path_bucket(std::uint64_t leaf, std::uint32_t level) const;
  std::uint64_t eviction_leaf(std::uint64_t evict_count) const;

  // Test and diagnostic introspection. These read DRAM without side effects.
  std::optional<std::uint32_t> leaf_of(std::uint64_t addr) const;
  bool in_stash(std::uint64_t addr) const { return stash_.count(addr) != 0; }
  std::optional<BucketMetadata> peek_metadata(std::uint64_t bucket) const;  // decrypted; nullopt if virgin
  VRSet peek_vrset(std::uint64_t bucket) const;
  std::vector<VRSet> peek_vrsets(std::uint64_t leaf) const;  // DRAM levels of a path
  bool check_path_invariant(std::string* why = nullptr) const;
  bool check_channel_disjointness(std::string* why = nullptr) const;
  bool check_mirror_equality(std::string* why = nullptr) const;
  std::vector<std::uint64_t> written_buckets() const;
  const std::vector<Mac54>& anchor() const { return anchor_; }
  std::uint64_t now() const { return now_; }

  // Read Path slot selection draws from this stream; callers can pin it.
  void reseed(std::uint64_t seed);
  void set_error_interval(std::uint64_t ticks) {
    error_interval_ = ticks;
    next_error_tick_ = now_ + ticks;
  }

 private:
  struct StashEntry {
    std::uint32_t leaf = 0;
    Data data{};
  };
  struct Fetched {
    std::uint64_t bucket = 0;
    Mac54 expected;
    Block576 stored;  // ECP-repaired metadata block as written
    BucketMetadata meta;
    VRSet vr;
    std::vector<EcpEntry> ecps;  // decoded entries of `stored`
    bool rewritten = false;
    std::optional<EcpPlan> plan;
    std::array<Block576, kSlotsPerBucket> slots;  // valid once rewritten
  };
  struct MustNodeState {
    std::uint64_t id = 0;
    std::uint32_t must_level = 0;
    std::uint64_t node_index = 0;
    bool leaf = false;
    MustNodeNonLeaf nl;
    MustNodeLeaf lf;
    Block576 stored;
    std::vector<EcpEntry> ecps;
  };
  struct MustPathState {
    std::vector<MustNodeState> nodes;  // DRAM levels, top-down
    MustPath path;
  };
  struct PhaseGuard {
    Controller* c;
    Phase saved;
    PhaseGuard(Controller* ctl, Phase p) : c(ctl), saved(ctl->phase_) { c->phase_ = p; }
    PhaseGuard(const PhaseGuard&) = delete;
    PhaseGuard& operator=(const PhaseGuard&) = delete;
    ~PhaseGuard() { c->phase_ = saved; }
  };
  using Blocks = std::vector<std::pair<std::uint64_t, StashEntry>>;

  void init(std::optional<DramGeometry> geometry, std::uint64_t seed);

  // Accounting, timing, raw I/O.
  Block576 read_raw(std::uint64_t index, BlockKind kind);
  void write_raw(std::uint64_t index, const Block576& bits, BlockKind kind);
  void mac_on_critical_path();
  void mac_off_critical_path();
  void sync();

  // Bucket content.
  Block576 seal_metadata(std::uint64_t bucket, const BucketMetadata& m, VRSet vr) const;
  BucketMetadata open_metadata(std::uint64_t bucket, const Block576& stored) const;
  Block576 seal_slot(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& plain, MacDomain d) const;
  Block576 open_slot(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& stored) const;
  bool slot_mac_ok(std::uint64_t bucket, std::uint32_t slot, EncCtr ctr, const Block576& stored, MacDomain d) const;
  Block576 meta_replica_block(std::uint64_t bucket, const BucketMetadata& m) const;
  Mac54 metadata_mac(std::uint64_t bucket, const Block576& stored) const;
  MacDomain slot_domain(const BucketMetadata& m, std::uint32_t slot) const;
  std::array<Block576, kSlotsPerBucket> build_slots(std::uint64_t bucket, const BucketMetadata& m,
                                                    const std::array<Data, kMaxRealSlots>& reals) const;
  Block576 peek_stored_metadata(std::uint64_t bucket, std::vector<EcpEntry>* ecps) const;

  // Metadata path.
  Fetched fetch_metadata(std::uint64_t bucket, Mac54 expected);
  std::vector<Fetched> fetch_path_metadata(std::uint64_t leaf);
  Block576 read_slot(Fetched& f, std::uint32_t slot);
  std::vector<std::size_t> live_entries(const Fetched& f) const;
  void write_bucket(Fetched& f, const Blocks& blocks);
  Mac54 commit_metadata(Fetched& f);
  void commit_path(std::vector<Fetched>& path, std::optional<MustPathState>& ms);

  // VR sets and the MUST.
  Mac54 must_node_mac(std::uint64_t id, const Block576& stored) const;
  const EcpLayout& must_ecp_layout(std::uint32_t must_level) const;
  MustNodeState decode_must_state(std::uint64_t id, std::uint32_t must_level, const Block576& stored) const;
  MustNodeState fetch_must_node(std::uint64_t id, std::uint32_t must_level, Mac54 expected, bool mirror);
  MustPathState fetch_must_path(std::uint64_t leaf);
  VRSet& must_vr_ref(MustPathState& st, std::uint32_t level, std::uint64_t pos);
  void set_must_vrset(MustPathState& st, std::uint32_t level, std::uint64_t pos, VRSet vr);
  void write_must_path(MustPathState& st);
  void load_vrsets(std::vector<Fetched>& path, std::uint64_t leaf, std::optional<MustPathState>& ms);

  // Protocol.
  void read_path(std::uint64_t leaf, std::uint64_t target);
  void after_read_path();
  void evict_path();
  Blocks read_valid_blocks(Fetched& f);
  void reshuffle_buckets(std::vector<Fetched>& path, const std::vector<std::size_t>& which);
  std::array<std::uint8_t, kSlotsPerBucket> permute_bucket();
  void relieve_stash_pressure();
  void inject_random_errors();

  // Recovery.
  void violation(std::uint64_t id, std::uint32_t level, bool must_node, const std::string& cause);
  Fetched recover_metadata(std::uint64_t bucket, Mac54 expected, const Block576& raw);
  Block576 recover_slot(Fetched& f, std::uint32_t slot, const Block576& raw);
  MustNodeState recover_must_node(std::uint64_t id, std::uint32_t must_level, Mac54 expected, bool mirror,
                                  const Block576& raw);
  std::optional<std::pair<BucketMetadata, Block576>> metadata_from_replicas(std::uint64_t bucket, Mac54 expected,
                                                                            std::uint32_t channel,
                                                                            RecoveryEvent& ev);
  FaultClass write_back_and_classify(std::uint64_t index, const Block576& intended, BlockKind kind,
                                     const std::vector<std::uint32_t>& known, std::vector<std::uint32_t>& bits);
  bool channel_healthy(std::uint32_t channel);
  void handle_fault(std::uint64_t bucket, std::int32_t slot, FaultClass c, const std::vector<std::uint32_t>& bits,
                    std::uint32_t channel);
  void rebuild_channel(std::uint32_t channel);
  void rebuild_must_channel(std::uint32_t channel);

  OramConfig cfg_;
  Scheme scheme_;
  SchemeFeatures feat_;
  MustGeometry must_;
  PhysicalLayout layout_;
  Dram dram_;
  Key key_;
  std::mt19937_64 rng_;      // leaf labels, slot choice, permutations
  std::mt19937_64 aux_rng_;  // errors and recovery; never perturbs rng_
  MacUnitPool mac_pool_;
  RemapTable remap_;
  std::vector<std::uint64_t> channel_free_;
  std::uint64_t now_ = 0;
  std::uint64_t pending_ = 0;
  std::uint64_t last_ready_ = 0;

  std::unordered_map<std::uint64_t, std::uint32_t> posmap_;
  std::map<std::uint64_t, StashEntry> stash_;
  std::vector<std::map<std::uint64_t, StashEntry>> cached_;  // on-chip top levels
  std::vector<Mac54> anchor_;                                 // MACs of the first DRAM level
  std::vector<MustNodeNonLeaf> must_cache_;                   // on-chip MUST levels
  std::vector<Mac54> must_anchor_;                            // MACs of the first DRAM MUST level
  std::map<std::uint64_t, std::uint64_t> must_relocated_;     // node id -> spare slot

  std::uint64_t evict_count_ = 0;
  std::uint64_t access_count_ = 0;
  std::uint64_t read_path_count_ = 0;
  std::uint64_t next_error_tick_ = 0;
  std::uint64_t error_interval_ = 8'000'000;
  bool must_read_mirror_ = false;
  std::map<std::uint64_t, std::vector<std::uint32_t>> pending_faults_;       // bucket-wide bit addresses
  std::map<std::uint64_t, std::vector<std::uint32_t>> pending_must_faults_;  // node bit positions
  std::unordered_set<std::uint64_t> written_;
  std::vector<std::uint64_t> written_list_;

  ControllerStats stats_;
  Phase phase_ = Phase::read_path;
  std::vector<ViolationEvent> violations_;
  std::vector<RecoveryEvent> recoveries_;

  PhaseGuard enter(Phase p) { return PhaseGuard(this, p); }
};

}  // namespace iro

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "iro/bits.hpp"

namespace iro {

class CapacityError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct DramGeometry {
  std::uint32_t channels = 2;
  std::uint32_t dimms_per_channel = 1;
  std::uint32_t ranks_per_dimm = 2;
  std::uint32_t banks = 8;
  std::uint64_t rows = 1u << 16;
  std::uint32_t columns = 128;

  std::uint32_t ranks_per_channel() const { return dimms_per_channel * ranks_per_dimm; }
  std::uint64_t capacity() const {
    return std::uint64_t{channels} * ranks_per_channel() * banks * rows * columns;
  }
  void validate() const;

  // Smallest row count (other dimensions fixed) holding `blocks`.
  static DramGeometry fitting(std::uint64_t blocks, std::uint32_t channels = 2);
};

// Rank indexes across all DIMMs of a channel.
struct Coords {
  std::uint32_t channel = 0;
  std::uint32_t rank = 0;
  std::uint32_t bank = 0;
  std::uint64_t row = 0;
  std::uint32_t column = 0;
  friend bool operator==(const Coords&, const Coords&) = default;
};

// Mapping order row:bank:column:rank:channel:offset, so the channel varies
// fastest at block granularity.
Coords map_address(std::uint64_t block_index, const DramGeometry& g);
std::uint64_t linear_index(const Coords& c, const DramGeometry& g);

enum class FaultKind { transient, permanent };
enum class FaultGranularity { bit, word, column, row, bank, channel };

struct FaultRecord {
  FaultKind kind = FaultKind::transient;
  FaultGranularity granularity = FaultGranularity::bit;
  Coords location;
  std::uint32_t bit = 0;  // bit index for `bit`, word index (0..8) for `word`
  bool stuck_value = false;
};

struct ScheduledFault {
  std::uint64_t tick = 0;
  FaultRecord record;
};

// One record per line: <tick> <kind> <granularity> <coords...> [stuck_value]
std::vector<ScheduledFault> parse_fault_schedule(std::istream& in);
std::string to_string(FaultKind k);
std::string to_string(FaultGranularity g);

struct AccessRecord {
  bool write = false;
  std::uint64_t index = 0;
  friend bool operator==(const AccessRecord&, const AccessRecord&) = default;
};

// Sparse bit-level ECC DRAM. Unwritten blocks read as zero.
class Dram {
 public:
  explicit Dram(DramGeometry g = {}, std::uint64_t seed = 0);

  const DramGeometry& geometry() const { return geometry_; }
  std::uint32_t channel_of(std::uint64_t index) const {
    return static_cast<std::uint32_t>(index % geometry_.channels);
  }

  Block576 read_block(std::uint64_t index);
  void write_block(std::uint64_t index, const Block576& bits);
  Block576 read_block(const Coords& c) { return read_block(linear_index(c, geometry_)); }
  void write_block(const Coords& c, const Block576& bits) { write_block(linear_index(c, geometry_), bits); }

  void inject_fault(const FaultRecord& record);
  void fail_channel(std::uint32_t channel);
  // The channel fails once `writes` further block writes have been issued.
  void fail_channel_after_writes(std::uint32_t channel, std::uint64_t writes);
  // Swap in a fresh DIMM: clears contents and every fault on the channel.
  void replace_channel(std::uint32_t channel);
  bool channel_failed(std::uint32_t channel) const;

  // Marks each bit of blocks [first, first + count) permanently stuck with
  // probability `rate`; returns the number of faulty bits added.
  std::uint64_t sample_permanent_faults(double rate, std::uint64_t seed, std::uint64_t first_block,
                                        std::uint64_t block_count);
  std::uint64_t permanent_fault_bits() const;
  bool has_stuck_bits(std::uint64_t index) const { return stuck_.count(index) != 0; }
  // Stuck-bit positions known to the device model (test/diagnostic use only).
  std::vector<std::uint32_t> stuck_bits(std::uint64_t index) const;

  // Attacker / test access: bypasses counters and the access log.
  Block576 peek(std::uint64_t index) const;
  void poke(std::uint64_t index, const Block576& bits);
  const std::unordered_map<std::uint64_t, Block576>& contents() const { return store_; }

  // Reads that hit an index in the watch set are recorded; writes unwatch.
  void watch(std::uint64_t index) { watched_.insert(index); }
  void unwatch_all() { watched_.clear(); watched_hits_.clear(); }
  bool watching(std::uint64_t index) const { return watched_.count(index) != 0; }
  const std::vector<std::uint64_t>& watched_hits() const { return watched_hits_; }

  void enable_log(bool on) { logging_ = on; }
  const std::vector<AccessRecord>& log() const { return log_; }
  void clear_log() { log_.clear(); }

  std::uint64_t reads() const { return reads_; }
  std::uint64_t writes() const { return writes_; }
  std::uint64_t channel_reads(std::uint32_t ch) const { return channel_reads_.at(ch); }
  std::uint64_t channel_writes(std::uint32_t ch) const { return channel_writes_.at(ch); }

 private:
  struct Stuck {
    Block576 mask;
    Block576 value;
  };
  struct RegionFault {
    FaultRecord record;
    std::uint64_t id = 0;
    std::unordered_set<std::uint64_t> consumed;  // transient: blocks already hit
  };

  void check(std::uint64_t index) const;
  bool in_region(const FaultRecord& r, const Coords& c) const;
  Block576 garbage(std::uint64_t index, std::uint64_t salt) const;
  void add_stuck(std::uint64_t index, std::size_t bit, bool value);

  DramGeometry geometry_;
  std::uint64_t seed_;
  std::unordered_map<std::uint64_t, Block576> store_;
  std::unordered_map<std::uint64_t, Stuck> stuck_;
  std::unordered_map<std::uint64_t, Block576> transient_;
  std::vector<RegionFault> regions_;
  std::uint64_t next_region_id_ = 1;
  std::vector<bool> failed_;
  std::optional<std::pair<std::uint32_t, std::uint64_t>> pending_failure_;
  std::unordered_set<std::uint64_t> watched_;
  std::vector<std::uint64_t> watched_hits_;
  bool logging_ = false;
  std::vector<AccessRecord> log_;
  std::uint64_t reads_ = 0, writes_ = 0;
  std::vector<std::uint64_t> channel_reads_, channel_writes_;
};

}  // namespace iro

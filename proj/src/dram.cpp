#include "iro/dram.hpp"

#include <algorithm>
#include <istream>
#include <random>
#include <sstream>

#include "iro/detail/mix.hpp"

namespace iro {

void DramGeometry::validate() const {
  if (channels == 0 || dimms_per_channel == 0 || ranks_per_dimm == 0 || banks == 0 || rows == 0 ||
      columns == 0)
    throw std::invalid_argument("dram geometry: all counts must be >= 1");
}

DramGeometry DramGeometry::fitting(std::uint64_t blocks, std::uint32_t channels) {
  DramGeometry g;
  g.channels = channels;
  const std::uint64_t per_row = std::uint64_t{g.channels} * g.ranks_per_channel() * g.banks * g.columns;
  g.rows = std::max<std::uint64_t>(1, (blocks + per_row - 1) / per_row);
  return g;
}

Coords map_address(std::uint64_t idx, const DramGeometry& g) {
  if (idx >= g.capacity()) throw CapacityError("block index " + std::to_string(idx) + " beyond capacity");
  Coords c;
  c.channel = static_cast<std::uint32_t>(idx % g.channels);
  idx /= g.channels;
  c.rank = static_cast<std::uint32_t>(idx % g.ranks_per_channel());
  idx /= g.ranks_per_channel();
  c.column = static_cast<std::uint32_t>(idx % g.columns);
  idx /= g.columns;
  c.bank = static_cast<std::uint32_t>(idx % g.banks);
  idx /= g.banks;
  c.row = idx;
  return c;
}

std::uint64_t linear_index(const Coords& c, const DramGeometry& g) {
  if (c.channel >= g.channels || c.rank >= g.ranks_per_channel() || c.bank >= g.banks || c.row >= g.rows ||
      c.column >= g.columns)
    throw CapacityError("coordinates outside geometry");
  std::uint64_t idx = c.row;
  idx = idx * g.banks + c.bank;
  idx = idx * g.columns + c.column;
  idx = idx * g.ranks_per_channel() + c.rank;
  idx = idx * g.channels + c.channel;
  return idx;
}

std::string to_string(FaultKind k) { return k == FaultKind::transient ? "transient" : "permanent"; }

std::string to_string(FaultGranularity g) {
  switch (g) {
    case FaultGranularity::bit: return "bit";
    case FaultGranularity::word: return "word";
    case FaultGranularity::column: return "column";
    case FaultGranularity::row: return "row";
    case FaultGranularity::bank: return "bank";
    case FaultGranularity::channel: return "channel";
  }
  return "?";
}

std::vector<ScheduledFault> parse_fault_schedule(std::istream& in) {
  std::vector<ScheduledFault> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::string kind, gran;
    ScheduledFault f;
    if (!(ss >> f.tick)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw std::runtime_error("fault schedule line " + std::to_string(lineno) + ": bad tick");
    }
    auto fail = [&](const std::string& why) {
      throw std::runtime_error("fault schedule line " + std::to_string(lineno) + ": " + why);
    };
    if (!(ss >> kind >> gran)) fail("missing kind/granularity");
    if (kind == "transient")
      f.record.kind = FaultKind::transient;
    else if (kind == "permanent")
      f.record.kind = FaultKind::permanent;
    else
      fail("unknown kind '" + kind + "'");
    auto& c = f.record.location;
    bool ok = true;
    if (gran == "bit" || gran == "word") {
      f.record.granularity = gran == "bit" ? FaultGranularity::bit : FaultGranularity::word;
      ok = static_cast<bool>(ss >> c.channel >> c.rank >> c.bank >> c.row >> c.column >> f.record.bit);
    } else if (gran == "column") {
      f.record.granularity = FaultGranularity::column;
      ok = static_cast<bool>(ss >> c.channel >> c.rank >> c.bank >> c.column);
    } else if (gran == "row") {
      f.record.granularity = FaultGranularity::row;
      ok = static_cast<bool>(ss >> c.channel >> c.rank >> c.bank >> c.row);
    } else if (gran == "bank") {
      f.record.granularity = FaultGranularity::bank;
      ok = static_cast<bool>(ss >> c.channel >> c.rank >> c.bank);
    } else if (gran == "channel") {
      f.record.granularity = FaultGranularity::channel;
      ok = static_cast<bool>(ss >> c.channel);
    } else {
      fail("unknown granularity '" + gran + "'");
    }
    if (!ok) fail("missing coordinates");
    int stuck = 0;
    if (ss >> stuck) f.record.stuck_value = stuck != 0;
    out.push_back(f);
  }
  return out;
}

Dram::Dram(DramGeometry g, std::uint64_t seed)
    : geometry_(g), seed_(seed), failed_(g.channels, false), channel_reads_(g.channels, 0),
      channel_writes_(g.channels, 0) {
  geometry_.validate();
}

void Dram::check(std::uint64_t index) const {
  if (index >= geometry_.capacity())
    throw CapacityError("block index " + std::to_string(index) + " beyond capacity");
}

Block576 Dram::garbage(std::uint64_t index, std::uint64_t salt) const {
  Block576 b;
  std::uint64_t s = detail::mix(detail::mix(seed_, index), salt);
  for (std::size_t i = 0; i < Block576::kWords; ++i) {
    s = detail::splitmix64(s);
    b.set_word(i, s);
  }
  return b;
}

bool Dram::in_region(const FaultRecord& r, const Coords& c) const {
  const auto& l = r.location;
  if (l.channel != c.channel) return false;
  switch (r.granularity) {
    case FaultGranularity::channel: return true;
    case FaultGranularity::bank: return l.rank == c.rank && l.bank == c.bank;
    case FaultGranularity::row: return l.rank == c.rank && l.bank == c.bank && l.row == c.row;
    case FaultGranularity::column: return l.rank == c.rank && l.bank == c.bank && l.column == c.column;
    default: return false;
  }
}

Block576 Dram::read_block(std::uint64_t index) {
  check(index);
  const auto ch = channel_of(index);
  ++reads_;
  ++channel_reads_[ch];
  if (logging_) log_.push_back({false, index});
  if (!watched_.empty() && watched_.count(index)) watched_hits_.push_back(index);
  if (failed_[ch]) return garbage(index, 0xdead0000ull + reads_);

  Block576 v;
  if (auto it = store_.find(index); it != store_.end()) v = it->second;
  if (auto it = transient_.find(index); it != transient_.end()) {
    v ^= it->second;
    transient_.erase(it);
  }
  if (!regions_.empty()) {
    const Coords c = map_address(index, geometry_);
    for (auto& r : regions_) {
      if (!in_region(r.record, c)) continue;
      if (r.record.kind == FaultKind::permanent) {
        v = garbage(index, r.id);
      } else if (r.consumed.insert(index).second) {
        v ^= garbage(index, r.id);
      }
    }
  }
  if (auto it = stuck_.find(index); it != stuck_.end()) {
    for (std::size_t w = 0; w < Block576::kWords; ++w) {
      const auto m = it->second.mask.word(w);
      v.set_word(w, (v.word(w) & ~m) | (it->second.value.word(w) & m));
    }
  }
  return v;
}

void Dram::write_block(std::uint64_t index, const Block576& bits) {
  check(index);
  const auto ch = channel_of(index);
  ++writes_;
  ++channel_writes_[ch];
  if (logging_) log_.push_back({true, index});
  watched_.erase(index);
  if (!failed_[ch]) {
    store_[index] = bits;
    transient_.erase(index);
    for (auto& r : regions_)
      if (r.record.kind == FaultKind::transient) r.consumed.insert(index);
  }
  if (pending_failure_ && --pending_failure_->second == 0) {
    failed_[pending_failure_->first] = true;
    pending_failure_.reset();
  }
}

void Dram::add_stuck(std::uint64_t index, std::size_t bit, bool value) {
  auto& s = stuck_[index];
  s.mask.set_bit(bit, true);
  s.value.set_bit(bit, value);
}

void Dram::inject_fault(const FaultRecord& r) {
  const auto& g = r.granularity;
  if (r.location.channel >= geometry_.channels) throw CapacityError("fault channel outside geometry");
  if (g == FaultGranularity::channel && r.kind == FaultKind::permanent) {
    fail_channel(r.location.channel);
    return;
  }
  if (g == FaultGranularity::bit || g == FaultGranularity::word) {
    const auto index = linear_index(r.location, geometry_);
    if (g == FaultGranularity::bit && r.bit >= kBlockBits) throw CapacityError("fault bit outside block");
    if (g == FaultGranularity::word && r.bit >= Block576::kWords) throw CapacityError("fault word outside block");
    const std::size_t lo = g == FaultGranularity::bit ? r.bit : r.bit * 64;
    const std::size_t n = g == FaultGranularity::bit ? 1 : 64;
    for (std::size_t b = lo; b < lo + n; ++b) {
      if (r.kind == FaultKind::permanent)
        add_stuck(index, b, r.stuck_value);
      else
        transient_[index].flip_bit(b);
    }
    return;
  }
  FaultRecord copy = r;
  if (!in_region(copy, copy.location)) throw std::logic_error("region record does not contain itself");
  regions_.push_back(RegionFault{copy, next_region_id_++, {}});
}

void Dram::fail_channel(std::uint32_t channel) {
  if (channel >= geometry_.channels) throw CapacityError("channel outside geometry");
  failed_[channel] = true;
}

void Dram::fail_channel_after_writes(std::uint32_t channel, std::uint64_t writes) {
  if (channel >= geometry_.channels) throw CapacityError("channel outside geometry");
  if (writes == 0)
    failed_[channel] = true;
  else
    pending_failure_ = {channel, writes};
}

bool Dram::channel_failed(std::uint32_t channel) const { return failed_.at(channel); }

void Dram::replace_channel(std::uint32_t channel) {
  if (channel >= geometry_.channels) throw CapacityError("channel outside geometry");
  failed_[channel] = false;
  std::erase_if(store_, [&](const auto& kv) { return channel_of(kv.first) == channel; });
  std::erase_if(stuck_, [&](const auto& kv) { return channel_of(kv.first) == channel; });
  std::erase_if(transient_, [&](const auto& kv) { return channel_of(kv.first) == channel; });
  std::erase_if(regions_, [&](const RegionFault& r) { return r.record.location.channel == channel; });
}

std::uint64_t Dram::sample_permanent_faults(double rate, std::uint64_t seed, std::uint64_t first_block,
                                           std::uint64_t block_count) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("fault rate must lie in [0,1]");
  if (block_count == 0 || rate == 0.0) return 0;
  check(first_block + block_count - 1);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  const std::uint64_t total = block_count * kBlockBits;
  std::uint64_t added = 0;
  auto mark = [&](std::uint64_t pos) {
    const std::uint64_t index = first_block + pos / kBlockBits;
    const std::size_t bit = pos % kBlockBits;
    const bool v = coin(rng);
    auto it = stuck_.find(index);
    if (it != stuck_.end() && it->second.mask.bit(bit)) return;
    add_stuck(index, bit, v);
    ++added;
  };
  if (rate >= 1.0) {
    for (std::uint64_t p = 0; p < total; ++p) mark(p);
    return added;
  }
  std::geometric_distribution<std::uint64_t> skip(rate);
  for (std::uint64_t p = skip(rng); p < total; p += 1 + skip(rng)) mark(p);
  return added;
}

std::uint64_t Dram::permanent_fault_bits() const {
  std::uint64_t n = 0;
  for (const auto& [_, s] : stuck_) n += s.mask.popcount();
  return n;
}

std::vector<std::uint32_t> Dram::stuck_bits(std::uint64_t index) const {
  std::vector<std::uint32_t> out;
  if (auto it = stuck_.find(index); it != stuck_.end())
    for (std::uint32_t b = 0; b < kBlockBits; ++b)
      if (it->second.mask.bit(b)) out.push_back(b);
  return out;
}

Block576 Dram::peek(std::uint64_t index) const {
  check(index);
  if (auto it = store_.find(index); it != store_.end()) return it->second;
  return {};
}

void Dram::poke(std::uint64_t index, const Block576& bits) {
  check(index);
  store_[index] = bits;
}

}  // namespace iro

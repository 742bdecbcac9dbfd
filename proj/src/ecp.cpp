#include "iro/ecp.hpp"

#include <algorithm>
#include <bit>
#include <sstream>

namespace iro {

EcpLayout EcpLayout::bucket() { return {5, 14, 13, 4, 1, 3, false, 13 * 576}; }
EcpLayout EcpLayout::must_non_leaf() { return {3, 12, 10, 3, 1, 2, true, 576}; }
EcpLayout EcpLayout::must_leaf() { return {7, 12, 10, 4, 1, 3, true, 576}; }

std::uint16_t encode_ecp_entry(const EcpLayout& l, const EcpEntry& e) {
  const std::uint32_t addr_mask = (1u << l.address_bits) - 1;
  std::uint32_t raw;
  if (l.in_use_flag) {
    raw = e.in_use ? ((e.address & addr_mask) | (std::uint32_t{e.value} << l.address_bits) |
                      (1u << (l.address_bits + 1)))
                   : 0u;
  } else {
    raw = e.in_use ? ((e.address & addr_mask) | (std::uint32_t{e.value} << l.address_bits)) : addr_mask;
  }
  return static_cast<std::uint16_t>(raw);
}

EcpEntry decode_ecp_entry(const EcpLayout& l, std::uint16_t raw) {
  const std::uint32_t addr_mask = (1u << l.address_bits) - 1;
  EcpEntry e;
  e.address = raw & addr_mask;
  e.value = (raw >> l.address_bits) & 1u;
  e.in_use = l.in_use_flag ? ((raw >> (l.address_bits + 1)) & 1u) != 0 : e.address < l.address_limit;
  if (e.address >= l.address_limit) e.in_use = false;
  return e;
}

std::vector<EcpEntry> read_ecps(const Block576& host_raw, const EcpLayout& l) {
  const std::size_t roffset = host_raw.get(l.roffset_offset, l.roffset_bits);
  Block576 work = host_raw;
  std::vector<EcpEntry> out;
  out.reserve(l.entry_count);
  for (std::size_t e = 0; e < l.entry_count; ++e) {
    const std::size_t p = physical_slot(l, e, roffset);
    const auto raw = static_cast<std::uint16_t>(work.get(l.region_offset + p * l.entry_bits, l.entry_bits));
    const EcpEntry entry = decode_ecp_entry(l, raw);
    if (entry.in_use && entry.address < kBlockBits) work.set_bit(entry.address, entry.value);
    out.push_back(entry);
  }
  return out;
}

Block576 apply_ecps(const Block576& raw, std::span<const EcpEntry> entries, std::uint32_t base) {
  Block576 out = raw;
  for (const auto& e : entries)
    if (e.in_use && e.address >= base && e.address < base + kBlockBits) out.set_bit(e.address - base, e.value);
  return out;
}

Block576 repair_host(const Block576& host_raw, const EcpLayout& l) {
  const auto entries = read_ecps(host_raw, l);
  return apply_ecps(host_raw, entries, 0);
}

std::size_t EcpPlan::used() const {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](auto& t) { return t.has_value(); }));
}

bool EcpPlan::covers(std::uint32_t addr) const {
  return std::any_of(targets.begin(), targets.end(), [&](auto& t) { return t && *t == addr; });
}

namespace {

std::optional<EcpPlan> try_rotation(const EcpLayout& l, const std::vector<std::uint32_t>& faults, std::size_t r) {
  struct RegionFault {
    long deadline;
    std::uint32_t addr;
  };
  std::vector<RegionFault> region;
  std::vector<std::uint32_t> other;
  for (auto a : faults) {
    if (l.in_region(a)) {
      const std::size_t p = (a - l.region_offset) / l.entry_bits;
      const std::size_t e = (p + l.entry_count - r) % l.entry_count;
      if (e == 0) return std::nullopt;
      region.push_back({static_cast<long>(e) - 1, a});
    } else {
      other.push_back(a);
    }
  }
  std::sort(region.begin(), region.end(),
            [](const RegionFault& x, const RegionFault& y) { return std::tie(x.deadline, x.addr) < std::tie(y.deadline, y.addr); });
  EcpPlan plan;
  plan.roffset = r;
  plan.targets.assign(l.entry_count, std::nullopt);
  std::size_t ri = 0, oi = 0;
  for (std::size_t e = 0; e < l.entry_count; ++e) {
    if (ri < region.size()) {
      if (region[ri].deadline < static_cast<long>(e)) return std::nullopt;
      plan.targets[e] = region[ri++].addr;
    } else if (oi < other.size()) {
      plan.targets[e] = other[oi++];
    }
  }
  if (ri < region.size() || oi < other.size()) return std::nullopt;
  return plan;
}

}  // namespace

std::optional<EcpPlan> allocate_ecp(const EcpLayout& l, std::vector<std::uint32_t> faults, std::size_t preferred_roffset) {
  std::sort(faults.begin(), faults.end());
  faults.erase(std::unique(faults.begin(), faults.end()), faults.end());
  for (auto a : faults)
    if (l.in_header(a) || a >= l.address_limit) return std::nullopt;
  if (faults.size() > l.entry_count) return std::nullopt;
  const std::size_t max_r = std::min<std::size_t>(l.entry_count, std::size_t{1} << l.roffset_bits);
  if (preferred_roffset < max_r)
    if (auto p = try_rotation(l, faults, preferred_roffset)) return p;
  for (std::size_t r = 0; r < max_r; ++r) {
    if (r == preferred_roffset) continue;
    if (auto p = try_rotation(l, faults, r)) return p;
  }
  return std::nullopt;
}

std::optional<EcpPlan> allocate_ecp_mirrored(const EcpLayout& l, std::span<const std::uint32_t> node_faults,
                                             std::span<const std::uint32_t> mirror_faults, std::size_t preferred_roffset) {
  std::vector<std::uint32_t> all(node_faults.begin(), node_faults.end());
  all.insert(all.end(), mirror_faults.begin(), mirror_faults.end());
  return allocate_ecp(l, std::move(all), preferred_roffset);
}

void embed_ecps(Block576& host, const EcpLayout& l, const EcpPlan& plan,
                const std::function<bool(std::uint32_t)>& external_bit) {
  host.put(0, 1, plan.used() > 0);
  host.put(l.roffset_offset, l.roffset_bits, plan.roffset);
  for (std::size_t e = l.entry_count; e-- > 0;) {
    EcpEntry entry;
    if (e < plan.targets.size() && plan.targets[e]) {
      entry.address = *plan.targets[e];
      entry.in_use = true;
      if (entry.address < kBlockBits)
        entry.value = host.bit(entry.address);
      else if (external_bit)
        entry.value = external_bit(entry.address);
      else
        throw std::logic_error("ecp target outside host block without a value source");
    }
    const std::size_t p = physical_slot(l, e, plan.roffset);
    host.put(l.region_offset + p * l.entry_bits, l.entry_bits, encode_ecp_entry(l, entry));
  }
}

std::vector<std::uint32_t> recorded_faults(std::span<const EcpEntry> entries) {
  std::vector<std::uint32_t> out;
  for (const auto& e : entries)
    if (e.in_use) out.push_back(e.address);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<std::uint32_t> differing_bits(const Block576& a, const Block576& b) {
  std::vector<std::uint32_t> out;
  for (std::size_t w = 0; w < Block576::kWords; ++w) {
    std::uint64_t d = a.word(w) ^ b.word(w);
    while (d) {
      const int t = std::countr_zero(d);
      out.push_back(static_cast<std::uint32_t>(w * 64 + static_cast<std::size_t>(t)));
      d &= d - 1;
    }
  }
  return out;
}

FaultClass classify_fault(const Block576& written, const Block576& reread) {
  const std::size_t n = (written ^ reread).popcount();
  if (n == 0) return FaultClass::transient;
  return n <= kMaxCellFaultsPerBlock ? FaultClass::permanent : FaultClass::device;
}

std::uint64_t RemapTable::remap(std::uint64_t bucket) {
  if (auto it = table_.find(bucket); it != table_.end()) return it->second;
  if (table_.size() >= capacity_)
    throw ReliabilityAlarm("remap table full: cannot relocate bucket " + std::to_string(bucket));
  const std::uint64_t spare = table_.size();
  table_.emplace(bucket, spare);
  return spare;
}

std::optional<std::uint64_t> RemapTable::lookup(std::uint64_t bucket) const {
  if (auto it = table_.find(bucket); it != table_.end()) return it->second;
  return std::nullopt;
}

std::size_t RemapTable::encoded_bytes(std::size_t bucket_id_bits) const {
  const std::size_t spare_bits = capacity_ <= 1 ? 1 : std::bit_width(capacity_ - 1);
  return (capacity_ * (bucket_id_bits + spare_bits) + 7) / 8;
}

std::string RemapTable::listing() const {
  std::ostringstream os;
  os << "# bucket spare\n";
  for (const auto& [b, s] : table_) os << b << " " << s << "\n";
  return os.str();
}

}  // namespace iro

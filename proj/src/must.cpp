#include "iro/must.hpp"

#include <stdexcept>

#include "iro/codec.hpp"

namespace iro {

std::uint64_t MustGeometry::level_base(std::uint32_t must_level) const {
  std::uint64_t base = 0;
  for (std::uint32_t m = 0; m < must_level; ++m) base += nodes_at(m);
  return base;
}

void MustGeometry::validate() const {
  if (must_levels == 0) throw std::invalid_argument("must: at least one level");
  if (nonleaf_span == 0 || nonleaf_span > 3) throw std::invalid_argument("must: non-leaf span must be 1..3");
  if (leaf_span == 0 || leaf_span > 5) throw std::invalid_argument("must: leaf span must be 1..5");
  if (coverage() > tree_levels) throw std::invalid_argument("must: covers more levels than the tree has");
  if (cached_must_levels >= must_levels) throw std::invalid_argument("must: leaf level cannot be cached");
  if (ipoffset_count() > layout::kMaxIpOffsets) throw std::invalid_argument("must: too many levels for IPOffsets");
}

SetLocation locate_set(const MustGeometry& g, std::uint32_t level, std::uint64_t position) {
  const std::uint32_t top = g.top_level();
  if (level < top || level >= g.tree_levels) throw std::out_of_range("must: level not covered");
  std::uint32_t m = (level - top) / g.nonleaf_span;
  if (m >= g.must_levels) m = g.must_levels - 1;
  const std::uint32_t first = g.first_binary_level(m);
  const std::uint32_t depth = level - first;
  SetLocation loc;
  loc.must_level = m;
  loc.node_index = position >> depth;
  loc.set_index = static_cast<std::uint32_t>((std::uint64_t{1} << depth) - 1 + (position - (loc.node_index << depth)));
  return loc;
}

MustPath pmeta_to_must_path(const MustGeometry& g, std::uint64_t leaf) {
  const std::uint32_t h = g.tree_levels;
  if (leaf >= (std::uint64_t{1} << (h - 1))) throw std::out_of_range("must: leaf outside tree");
  MustPath path;
  for (std::uint32_t m = 0; m < g.must_levels; ++m) {
    MustPathStep step;
    step.must_level = m;
    const std::uint32_t first = g.first_binary_level(m);
    step.node_index = leaf >> (h - 1 - first);
    step.node_id = g.level_base(m) + step.node_index;
    for (std::uint32_t d = 0; d < g.span(m); ++d) {
      const std::uint32_t level = first + d;
      const std::uint64_t pos = leaf >> (h - 1 - level);
      step.pmeta_nodes.push_back((std::uint64_t{1} << level) - 1 + pos);
      step.positions.push_back(locate_set(g, level, pos).set_index);
    }
    step.ipoffset = static_cast<std::uint8_t>(step.positions.back());
    if (!g.is_leaf_level(m)) path.ipoffsets.push_back(step.ipoffset);
    path.steps.push_back(std::move(step));
  }
  return path;
}

std::vector<std::uint32_t> internal_path_from_ipoffset(std::uint32_t ipoffset) {
  std::vector<std::uint32_t> rev{ipoffset};
  while (rev.back() != 0) rev.push_back((rev.back() - 1) / 2);
  return {rev.rbegin(), rev.rend()};
}

MustStorageReport must_storage_report(const MustGeometry& g) {
  g.validate();
  MustStorageReport r;
  for (std::uint32_t m = 0; m < g.must_levels; ++m) {
    const auto n = g.nodes_at(m);
    r.nodes_per_level.push_back(n);
    r.total_nodes += n;
    if (!g.is_leaf_level(m)) {
      r.non_leaf_nodes += n;
      if (m >= g.cached_must_levels) r.dram_non_leaf_nodes += n;
    }
    if (m >= g.cached_must_levels)
      r.dram_nodes += n;
    else
      r.cached_bytes += n * (kBlockBits / 8);
  }
  r.bytes_per_copy = r.total_nodes * (kBlockBits / 8);
  r.dram_bytes_per_copy = r.dram_nodes * (kBlockBits / 8);
  return r;
}

}  // namespace iro

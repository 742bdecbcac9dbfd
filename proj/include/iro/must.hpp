#pragma once

#include <cstdint>
#include <vector>

namespace iro {

// Shape of the Minimum Update Subtree Tree laid over the bottom binary levels
// of the metadata tree (one VR set per ORAM bucket). Every non-leaf MUS spans
// `nonleaf_span` binary levels (2^span children), leaf MUS span `leaf_span`.
struct MustGeometry {
  std::uint32_t tree_levels = 23;
  std::uint32_t nonleaf_span = 3;
  std::uint32_t leaf_span = 5;
  std::uint32_t must_levels = 5;
  std::uint32_t cached_must_levels = 2;

  std::uint32_t coverage() const { return (must_levels - 1) * nonleaf_span + leaf_span; }
  // Binary level of the MUST roots; levels above it carry no VR sets.
  std::uint32_t top_level() const { return tree_levels - coverage(); }
  std::uint32_t span(std::uint32_t must_level) const {
    return must_level + 1 == must_levels ? leaf_span : nonleaf_span;
  }
  std::uint32_t first_binary_level(std::uint32_t must_level) const {
    return top_level() + must_level * nonleaf_span;
  }
  std::uint64_t nodes_at(std::uint32_t must_level) const {
    return std::uint64_t{1} << first_binary_level(must_level);
  }
  std::uint64_t level_base(std::uint32_t must_level) const;  // global id of first node
  std::uint64_t total_nodes() const { return level_base(must_levels); }
  std::uint64_t dram_nodes() const { return total_nodes() - level_base(cached_must_levels); }
  bool is_leaf_level(std::uint32_t must_level) const { return must_level + 1 == must_levels; }
  std::uint32_t ipoffset_count() const { return must_levels - 1; }

  void validate() const;
};

struct SetLocation {
  std::uint32_t must_level = 0;
  std::uint64_t node_index = 0;  // within the MUST level
  std::uint32_t set_index = 0;   // level order inside the MUS
  friend bool operator==(const SetLocation&, const SetLocation&) = default;
};

// Where the VR set of the bucket at (binary level, position in level) lives.
SetLocation locate_set(const MustGeometry& g, std::uint32_t level, std::uint64_t position);

struct MustPathStep {
  std::uint32_t must_level = 0;
  std::uint64_t node_index = 0;
  std::uint64_t node_id = 0;               // global level-order id
  std::vector<std::uint32_t> positions;    // 0-based set index per covered level
  std::vector<std::uint64_t> pmeta_nodes;  // level-order ids in the metadata tree
  std::uint8_t ipoffset = 0;               // index of the deepest internal-path node
};

struct MustPath {
  std::vector<MustPathStep> steps;       // root -> leaf
  std::vector<std::uint8_t> ipoffsets;   // for non-leaf levels, as stored in the leaf
};

// `leaf` is the 0-based leaf ordinal of the metadata tree.
MustPath pmeta_to_must_path(const MustGeometry& g, std::uint64_t leaf);

// Internal path (root-first set indices) ending at `ipoffset` inside a MUS.
std::vector<std::uint32_t> internal_path_from_ipoffset(std::uint32_t ipoffset);

struct MustStorageReport {
  std::vector<std::uint64_t> nodes_per_level;
  std::uint64_t total_nodes = 0;
  std::uint64_t non_leaf_nodes = 0;
  std::uint64_t dram_non_leaf_nodes = 0;
  std::uint64_t dram_nodes = 0;
  std::uint64_t cached_bytes = 0;
  std::uint64_t bytes_per_copy = 0;       // every level, 72 B per node
  std::uint64_t dram_bytes_per_copy = 0;
};

MustStorageReport must_storage_report(const MustGeometry& g);

}  // namespace iro

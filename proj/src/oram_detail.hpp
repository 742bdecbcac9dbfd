#pragma once

#include <bit>
#include <cstdint>

#include "iro/oram.hpp"

namespace iro::detail {

inline Block576 to_block(const Data& d) {
  Block576 b;
  for (std::size_t w = 0; w < 8; ++w) b.set_word(w, d[w]);
  return b;
}

inline Data to_data(const Block576& b) {
  Data d{};
  for (std::size_t w = 0; w < 8; ++w) d[w] = b.word(w);
  return d;
}

inline std::uint32_t level_of(std::uint64_t bucket) {
  return static_cast<std::uint32_t>(std::bit_width(bucket + 1) - 1);
}
inline std::uint64_t position_of(std::uint64_t bucket) { return bucket + 1 - (std::uint64_t{1} << level_of(bucket)); }
// Which child MAC of the parent covers `bucket`.
inline std::size_t child_index(std::uint64_t bucket) { return bucket % 2 == 1 ? 0 : 1; }

}  // namespace iro::detail

#pragma once

#include <array>
#include <cassert>
#include <cstddef>
#include <cstdint>
#include <span>

namespace iro {

inline constexpr std::size_t kBlockBits = 576;
inline constexpr std::size_t kDataBits = 512;
inline constexpr std::size_t kEccBits = 64;

// The 576-bit unit of storage and transfer: bits [0,512) are the data area,
// bits [512,576) live on the ninth (ECC) chip.
class Block576 {
 public:
  static constexpr std::size_t kWords = 9;

  constexpr Block576() = default;

  bool bit(std::size_t i) const {
    assert(i < kBlockBits);
    return (words_[i / 64] >> (i % 64)) & 1u;
  }

  void set_bit(std::size_t i, bool v) {
    assert(i < kBlockBits);
    const std::uint64_t m = std::uint64_t{1} << (i % 64);
    if (v)
      words_[i / 64] |= m;
    else
      words_[i / 64] &= ~m;
  }

  void flip_bit(std::size_t i) { words_[i / 64] ^= std::uint64_t{1} << (i % 64); }

  // Little-endian field access; width <= 64, may straddle a word boundary.
  std::uint64_t get(std::size_t offset, std::size_t width) const {
    assert(width <= 64 && offset + width <= kBlockBits);
    if (width == 0) return 0;
    const std::size_t w = offset / 64, s = offset % 64;
    std::uint64_t v = words_[w] >> s;
    if (s != 0 && s + width > 64) v |= words_[w + 1] << (64 - s);
    return width == 64 ? v : (v & ((std::uint64_t{1} << width) - 1));
  }

  void put(std::size_t offset, std::size_t width, std::uint64_t value) {
    assert(width <= 64 && offset + width <= kBlockBits);
    if (width == 0) return;
    const std::uint64_t mask = width == 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << width) - 1);
    value &= mask;
    const std::size_t w = offset / 64, s = offset % 64;
    words_[w] = (words_[w] & ~(mask << s)) | (value << s);
    if (s != 0 && s + width > 64) {
      const std::size_t hi = s + width - 64;
      const std::uint64_t hmask = (std::uint64_t{1} << hi) - 1;
      words_[w + 1] = (words_[w + 1] & ~hmask) | (value >> (64 - s));
    }
  }

  std::uint64_t word(std::size_t i) const { return words_[i]; }
  void set_word(std::size_t i, std::uint64_t v) { words_[i] = v; }
  std::span<const std::uint64_t, kWords> words() const { return words_; }

  bool is_zero() const {
    for (auto w : words_)
      if (w) return false;
    return true;
  }

  std::size_t popcount() const {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(__builtin_popcountll(w));
    return n;
  }

  Block576& operator^=(const Block576& o) {
    for (std::size_t i = 0; i < kWords; ++i) words_[i] ^= o.words_[i];
    return *this;
  }
  friend Block576 operator^(Block576 a, const Block576& b) { return a ^= b; }
  friend bool operator==(const Block576&, const Block576&) = default;

  // Data area as 8 words; the ECC area is word 8.
  std::uint64_t ecc_area() const { return words_[8]; }
  void set_ecc_area(std::uint64_t v) { words_[8] = v; }

  void clear_ecc_area() { words_[8] = 0; }

 private:
  std::array<std::uint64_t, kWords> words_{};
};

}  // namespace iro

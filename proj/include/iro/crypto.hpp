#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "iro/bits.hpp"

namespace iro {

inline constexpr std::uint64_t kEncCtrMask = (std::uint64_t{1} << 60) - 1;
inline constexpr std::uint64_t kMacMask = (std::uint64_t{1} << 54) - 1;
inline constexpr std::uint64_t kPartialMask = (std::uint64_t{1} << 10) - 1;

struct EncCtr {
  std::uint64_t value = 0;  // 60 bits
  EncCtr next() const { return {(value + 1) & kEncCtrMask}; }
  friend bool operator==(EncCtr, EncCtr) = default;
};

// 54-bit tag. Zero is reserved: parents store 0 for a child block that has
// never been written, so computed tags are never 0.
struct Mac54 {
  std::uint64_t value = 0;
  bool is_sentinel() const { return value == 0; }
  friend bool operator==(Mac54, Mac54) = default;
};

struct Key {
  std::array<std::uint8_t, 32> bytes{};
  static Key from_seed(std::uint64_t seed);
  friend bool operator==(const Key&, const Key&) = default;
};

// Distinguishes what a data-slot tag authenticates. Attackers cannot tell the
// domains apart without the key.
enum class MacDomain : std::uint8_t { data = 1, metadata = 2, metadata_replica = 3, must_node = 4 };

// Slot offset used for the pad that covers a metadata block's sensitive fields.
inline constexpr std::uint32_t kMetadataPadOffset = 0xff;

// Keyed PRF backed by BLAKE2b (libsodium).
std::array<std::uint64_t, 8> pad512(const Key& key, std::uint64_t bucket_id, EncCtr ctr, std::uint32_t slot_offset);

// Counter-mode style encryption of a 512-bit data area: XOR with the pad.
// The ECC area of `payload` is returned unchanged.
Block576 otp_crypt(const Key& key, std::uint64_t bucket_id, EncCtr ctr, std::uint32_t slot_offset,
                   const Block576& payload);

// Tag over (address, EncCtr, 512-bit ciphertext, 10-bit partial counter).
Mac54 mac_data(const Key& key, std::uint64_t address, EncCtr ctr, const Block576& ciphertext,
               std::uint32_t partial_ctr, MacDomain domain = MacDomain::data);

// Tag over (address, full 576-bit block).
Mac54 mac_meta(const Key& key, std::uint64_t address, const Block576& bits,
               MacDomain domain = MacDomain::metadata);

// A fixed pool of MAC engines with constant service latency.
class MacUnitPool {
 public:
  explicit MacUnitPool(std::size_t units = 4, std::uint64_t latency = 80);

  // Assigns the earliest-free unit; returns the completion cycle.
  std::uint64_t submit(std::uint64_t now);

  std::size_t units() const { return free_at_.size(); }
  std::uint64_t latency() const { return latency_; }
  std::uint64_t submissions() const { return submissions_; }
  std::uint64_t total_wait() const { return total_wait_; }

 private:
  std::vector<std::uint64_t> free_at_;
  std::uint64_t latency_;
  std::uint64_t submissions_ = 0;
  std::uint64_t total_wait_ = 0;
};

}  // namespace iro

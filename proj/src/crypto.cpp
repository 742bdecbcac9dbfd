#include "iro/crypto.hpp"

#include <sodium.h>

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "iro/detail/mix.hpp"

namespace iro {
namespace {

struct SodiumInit {
  SodiumInit() {
    if (sodium_init() < 0) throw std::runtime_error("libsodium initialisation failed");
  }
};

void ensure_sodium() { static SodiumInit once; }

class Hasher {
 public:
  Hasher(const Key& key, std::size_t out_len) : out_len_(out_len) {
    ensure_sodium();
    crypto_generichash_init(&state_, key.bytes.data(), key.bytes.size(), out_len);
  }
  Hasher& u64(std::uint64_t v) {
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(v >> (8 * i));
    crypto_generichash_update(&state_, b, sizeof b);
    return *this;
  }
  Hasher& block(const Block576& blk, std::size_t words) {
    for (std::size_t i = 0; i < words; ++i) u64(blk.word(i));
    return *this;
  }
  void finish(std::uint8_t* out) { crypto_generichash_final(&state_, out, out_len_); }

 private:
  crypto_generichash_state state_;
  std::size_t out_len_;
};

std::uint64_t load_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

Mac54 finish_tag(Hasher& h) {
  std::uint8_t out[16];
  h.finish(out);
  std::uint64_t v = load_le(out) & kMacMask;
  if (v == 0) v = 1;
  return {v};
}

}  // namespace

Key Key::from_seed(std::uint64_t seed) {
  Key k;
  std::uint64_t s = seed;
  for (std::size_t i = 0; i < k.bytes.size(); i += 8) {
    s = detail::splitmix64(s);
    for (std::size_t j = 0; j < 8; ++j) k.bytes[i + j] = static_cast<std::uint8_t>(s >> (8 * j));
  }
  return k;
}

std::array<std::uint64_t, 8> pad512(const Key& key, std::uint64_t bucket_id, EncCtr ctr, std::uint32_t slot_offset) {
  Hasher h(key, 64);
  h.u64(0x7061640000000000ull).u64(bucket_id).u64(ctr.value).u64(slot_offset);
  std::uint8_t out[64];
  h.finish(out);
  std::array<std::uint64_t, 8> pad;
  for (std::size_t i = 0; i < 8; ++i) pad[i] = load_le(out + 8 * i);
  return pad;
}

Block576 otp_crypt(const Key& key, std::uint64_t bucket_id, EncCtr ctr, std::uint32_t slot_offset,
                   const Block576& payload) {
  const auto pad = pad512(key, bucket_id, ctr, slot_offset);
  Block576 out = payload;
  for (std::size_t i = 0; i < 8; ++i) out.set_word(i, payload.word(i) ^ pad[i]);
  return out;
}

Mac54 mac_data(const Key& key, std::uint64_t address, EncCtr ctr, const Block576& ciphertext,
               std::uint32_t partial_ctr, MacDomain domain) {
  Hasher h(key, 16);
  h.u64(static_cast<std::uint64_t>(domain)).u64(address).u64(ctr.value).u64(partial_ctr & kPartialMask);
  h.block(ciphertext, 8);
  return finish_tag(h);
}

Mac54 mac_meta(const Key& key, std::uint64_t address, const Block576& bits, MacDomain domain) {
  Hasher h(key, 16);
  h.u64(static_cast<std::uint64_t>(domain)).u64(address);
  h.block(bits, Block576::kWords);
  return finish_tag(h);
}

MacUnitPool::MacUnitPool(std::size_t units, std::uint64_t latency) : free_at_(units, 0), latency_(latency) {
  if (units == 0) throw std::invalid_argument("MAC pool needs at least one unit");
}

std::uint64_t MacUnitPool::submit(std::uint64_t now) {
  auto it = std::min_element(free_at_.begin(), free_at_.end());
  const std::uint64_t start = std::max(now, *it);
  *it = start + latency_;
  ++submissions_;
  total_wait_ += start - now;
  return *it;
}

}  // namespace iro

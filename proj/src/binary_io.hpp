#pragma once

#include <cstdint>
#include <cstring>
#include <type_traits>
#include <string>
#include <vector>

// Explicit little-endian encoding, independent of host byte order.
namespace peco::detail {

template <typename T>
void put_le(std::vector<uint8_t>& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<uint8_t>(value >> (8 * i)));
}

template <typename T>
T get_le(const uint8_t* p) {
  static_assert(std::is_unsigned_v<T>);
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

inline void put_f32(std::vector<uint8_t>& out, float value) {
  uint32_t bits;
  std::memcpy(&bits, &value, sizeof(bits));
  put_le<uint32_t>(out, bits);
}

inline float get_f32(const uint8_t* p) {
  const uint32_t bits = get_le<uint32_t>(p);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

inline void put_bytes(std::vector<uint8_t>& out, const std::string& s) {
  out.insert(out.end(), s.begin(), s.end());
}

}  // namespace peco::detail

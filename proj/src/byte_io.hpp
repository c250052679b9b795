#pragma once

// Little-endian primitives shared by the binary formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

namespace debiaslens::detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace debiaslens::detail

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "patchcad/error.hpp"

namespace patchcad::io {

// Little-endian primitives shared by the NMAP, SHAD, P2CM and P2CI formats.

inline void write_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                              static_cast<char>((v >> 16) & 0xFF),
                              static_cast<char>((v >> 24) & 0xFF)};
  os.write(b.data(), 4);
}

inline void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<std::uint32_t>(v)); }

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void write_blob(std::ostream& os, std::string_view blob) {
  write_u32(os, static_cast<std::uint32_t>(blob.size()));
  os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw Error("truncated_file", "unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float read_f32(std::istream& is) { return std::bit_cast<float>(read_u32(is)); }

inline std::string read_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("truncated_file", "unexpected end of file");
  return s;
}

inline std::string read_blob(std::istream& is) { return read_bytes(is, read_u32(is)); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  const std::string got = read_bytes(is, magic.size());
  if (got != magic) {
    throw Error("bad_magic", "expected magic '" + std::string(magic) + "', found '" + got + "'");
  }
}

}  // namespace patchcad::io

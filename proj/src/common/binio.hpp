#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "multirep/data.hpp"

// Little-endian byte I/O and the key=value header shared by the binary containers.
namespace multirep::binio {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32s(std::ostream& out, const float* v, std::size_t n) {
  std::string buf(n * 4, '\0');
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(v[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((bits >> (8 * k)) & 0xffu);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void get_f32s(std::istream& in, float* v, std::size_t n) {
  std::string buf(n * 4, '\0');
  if (!in.read(buf.data(), static_cast<std::streamsize>(buf.size()))) throw DataError("unexpected end of file");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + k])) << (8 * k);
    v[i] = std::bit_cast<float>(bits);
  }
}

inline void put_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& in, void* data, std::size_t n) {
  if (!in.read(static_cast<char*>(data), static_cast<std::streamsize>(n))) throw DataError("unexpected end of file");
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw DataError("bad number in header: " + std::string(s));
  return v;
}

inline std::uint64_t parse_u64(std::string_view s) {
  std::uint64_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw DataError("bad integer in header: " + std::string(s));
  return v;
}

using Header = std::map<std::string, std::string>;

inline void put_header(std::ostream& out, const Header& h) {
  std::string text;
  for (const auto& [k, v] : h) text += k + "=" + v + "\n";
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  put_bytes(out, text.data(), text.size());
}

inline Header get_header(std::istream& in) {
  const std::uint32_t len = get_u32(in);
  if (len > (1u << 24)) throw DataError("header length " + std::to_string(len) + " is implausible");
  std::string text(len, '\0');
  get_bytes(in, text.data(), len);
  Header h;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed header line: " + line);
    h[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return h;
}

inline const std::string& require_key(const Header& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw DataError("header is missing key " + key);
  return it->second;
}

inline void check_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  get_bytes(in, got.data(), got.size());
  if (got != magic) throw DataError("bad magic bytes: expected " + std::string(magic));
}

}  // namespace multirep::binio

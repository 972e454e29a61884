#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mmvae/errors.hpp"

namespace mmvae {

// Little-endian buffer writer/reader used by the dataset and checkpoint
// formats. Readers throw FormatError carrying the byte offset of the failure.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(b, 4);
  }
  void u16(std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    bytes(b, 2);
  }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    for (int i = 0; i < 8; ++i) {
      unsigned char b = static_cast<unsigned char>(u >> (8 * i));
      bytes(&b, 1);
    }
  }
  void str(std::string_view s) { bytes(s.data(), s.size()); }

  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> buf) : buf_(buf) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n)
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }

  void bytes(void* out, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::uint16_t u16(const char* what) {
    unsigned char b[2];
    bytes(b, 2, what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  float f32(const char* what) {
    std::uint32_t u = u32(what);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }

  double f64(const char* what) {
    unsigned char b[8];
    bytes(b, 8, what);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_magic(std::string_view magic) {
    std::size_t at = pos_;
    std::string got = str(magic.size(), "magic");
    if (got != magic)
      throw FormatError("bad magic: expected '" + std::string(magic) + "', got '" + got + "'", at);
  }

 private:
  std::span<const unsigned char> buf_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file for reading: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::filesystem::path& path,
                             std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open file for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("short write to " + path.string());
}

// FNV-1a over raw bytes; used for content-addressed caches.
inline std::uint64_t fnv1a_bytes(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s, const char* what) {
  std::uint64_t v = 0;
  if (s.empty() || s.size() > 16) throw ConfigError(std::string("bad hex field ") + what);
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9')
      v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f')
      v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else
      throw ConfigError(std::string("bad hex field ") + what);
  }
  return v;
}

}  // namespace mmvae

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "poiattrib/domain.hpp"
#include "poiattrib/error.hpp"

namespace poiattrib {

/// FNV-1a over a byte string.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Hash of the category vocabulary; used to detect artifacts built against a
/// different category set.
inline std::uint64_t vocab_hash(const CategoryVocab& vocab) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& name : vocab.names()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64("\n", 1, h);
  }
  return h;
}

/// Little-endian binary writer. All multi-byte integers and doubles in the
/// bank/checkpoint formats go through here.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path)
      : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error(ErrorKind::io, "cannot open '" + path + "' for writing");
  }

  void magic(const char (&m)[5]) { out_.write(m, 4); }

  template <typename T>
  void num(T v) {
    static_assert(std::is_arithmetic_v<T>);
    if constexpr (std::endian::native == std::endian::big) {
      unsigned char buf[sizeof(T)];
      std::memcpy(buf, &v, sizeof(T));
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
        std::swap(buf[i], buf[sizeof(T) - 1 - i]);
      out_.write(reinterpret_cast<const char*>(buf), sizeof(T));
    } else {
      out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
  }

  void str(const std::string& s) {
    num<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void doubles(const double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) num<double>(data[i]);
  }

  void close() {
    out_.close();
    if (!out_) throw Error(ErrorKind::io, "error writing '" + path_ + "'");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

/// Little-endian binary reader; any read past end-of-file reports the
/// artifact as corrupt.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw Error(ErrorKind::io, "cannot open '" + path + "' for reading");
  }

  void expect_magic(const char (&m)[5]) {
    char buf[4];
    raw(buf, 4);
    if (std::memcmp(buf, m, 4) != 0)
      throw Error(ErrorKind::corrupt, "'" + path_ + "': bad magic bytes");
  }

  template <typename T>
  T num() {
    static_assert(std::is_arithmetic_v<T>);
    unsigned char buf[sizeof(T)];
    raw(reinterpret_cast<char*>(buf), sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
        std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }

  std::string str(std::uint32_t max_len = 1u << 24) {
    auto n = num<std::uint32_t>();
    if (n > max_len)
      throw Error(ErrorKind::corrupt, "'" + path_ + "': implausible string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  void doubles(double* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) data[i] = num<double>();
  }

  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

  const std::string& path() const { return path_; }

 private:
  void raw(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n))
      throw Error(ErrorKind::corrupt, "'" + path_ + "': unexpected end of file");
  }

  std::ifstream in_;
  std::string path_;
};

}  // namespace poiattrib

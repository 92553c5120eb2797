#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "vmx/errors.hpp"

namespace vmx::io {

static_assert(std::endian::native == std::endian::little, "binary containers assume a little-endian host");

// Append-only little-endian byte buffer.
class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string16(std::string_view s) {
    if (s.size() > 0xFFFF) throw FormatError("string of " + std::to_string(s.size()) + " bytes exceeds u16 length");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  const std::vector<unsigned char>& bytes() const { return bytes_; }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

// Bounds-checked cursor; every short read reports the offset where it started.
class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& bytes, std::size_t limit = SIZE_MAX)
      : bytes_(bytes), limit_(std::min(limit, bytes.size())) {}

  template <class T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, std::size_t n, const char* what) {
    need(n, what);
    if (n) std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string16(const char* what) {
    const auto n = get<std::uint16_t>(what);
    std::string s(n, '\0');
    get_bytes(s.data(), n, what);
    return s;
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return limit_ - pos_; }

  void need(std::size_t n, const char* what) const {
    if (n > limit_ - pos_) {
      throw IoError(std::string("truncated data reading ") + what + ": need " + std::to_string(n) + " bytes, " +
                        std::to_string(limit_ - pos_) + " left",
                    pos_);
    }
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for reading", 0);
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing", 0);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path, bytes.size());
}

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace vmx::io

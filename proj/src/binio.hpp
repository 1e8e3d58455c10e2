#pragma once

// Little-endian binary file helpers shared by the checkpoint / bundle /
// recovered-matrix writers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gradsep/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialized formats are little-endian; big-endian hosts are unsupported");

namespace gradsep::binio {

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) { put_bytes(out, &v, 4); }
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) { put_bytes(out, &v, 8); }
inline void put_f64(std::vector<std::uint8_t>& out, double v) { put_bytes(out, &v, 8); }
inline void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

inline void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string origin)
      : data_(data), size_(size), origin_(std::move(origin)) {}

  std::size_t remaining() const { return size_ - pos_; }
  bool at_end() const { return pos_ == size_; }

  void raw(void* out, std::size_t n) {
    if (remaining() < n) throw IoError(origin_ + ": truncated file");
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > remaining()) throw IoError(origin_ + ": truncated string");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::vector<double> f64_array(std::size_t n) {
    if (n > remaining() / 8) throw IoError(origin_ + ": truncated payload");
    std::vector<double> v(n);
    raw(v.data(), n * 8);
    return v;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
  std::string origin_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return bytes;
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace gradsep::binio

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "haec/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are not supported");

namespace haec::io {

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// Append-only little-endian byte sink.
class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    buf_.append(p, sizeof(T));
  }
  template <typename T>
  void put_span(std::span<const T> values) {
    buf_.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
  }
  void put_bytes(std::string_view s) { buf_.append(s); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

// Bounds-checked little-endian reader; failures raise ParseError with the offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  template <typename T>
  T get() {
    require(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  template <typename T>
  void get_into(std::span<T> out) {
    require(out.size_bytes());
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }
  std::string get_string(std::size_t n) {
    require(n);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic(std::string_view magic) {
    const std::size_t at = pos_;
    if (get_string(magic.size()) != magic)
      throw ParseError("bad magic, expected \"" + std::string(magic) + "\"", at);
  }
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void require(std::size_t n) const {
    if (data_.size() - pos_ < n) throw ParseError("truncated payload", pos_);
  }
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

}  // namespace haec::io

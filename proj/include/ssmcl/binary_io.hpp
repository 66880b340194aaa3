#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ssmcl/errors.hpp"

namespace ssmcl {

// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

// Little-endian byte source; every read past the end throws FormatError.
class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& buf, std::string context)
      : buf_(buf), context_(std::move(context)) {}

  void expect(std::string_view magic) {
    need(magic.size(), "magic");
    if (std::memcmp(buf_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError(context_ + ": bad magic bytes", pos_);
    }
    pos_ += magic.size();
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  /// Fails unless at least n bytes remain.
  void need(std::size_t n, const char* what) const {
    if (buf_.size() - pos_ < n) {
      throw FormatError(context_ + ": truncated while reading " + what, pos_);
    }
  }
  /// Fails unless a*b*elem bytes remain; immune to overflow in the product.
  void need_product(std::uint64_t a, std::uint64_t b, std::uint64_t elem, const char* what) const {
    const unsigned __int128 total = static_cast<unsigned __int128>(a) * b * elem;
    if (total > buf_.size() - pos_) {
      throw FormatError(context_ + ": truncated while reading " + what, pos_);
    }
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<std::uint8_t>& buf_;
  std::string context_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ssmcl

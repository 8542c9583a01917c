#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sts/tensor.hpp"

namespace sts::io {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling file and renames it into place.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Little-endian IEEE-754 bytes of `values`, hex encoded (lowercase).
std::string floats_to_hex(std::span<const float> values);
std::vector<float> hex_to_floats(const std::string& hex);

template <typename U>
void put_le(Bytes& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::uint8_t raw[sizeof(U)];
  std::memcpy(raw, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
  out.insert(out.end(), raw, raw + sizeof(U));
}

/// Sequential little-endian reader that raises a "truncated" error instead of
/// running past the end of the buffer.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, raw, sizeof(U));
    return value;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw Error("truncated", what_ + ": truncated at byte " + std::to_string(pos_) + " (need " +
                                   std::to_string(n) + " more, " +
                                   std::to_string(bytes_.size() - pos_) + " available)");
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace sts::io

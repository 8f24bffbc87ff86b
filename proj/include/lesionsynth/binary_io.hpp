#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <zlib.h>

#include "lesionsynth/error.hpp"

namespace lesionsynth {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in native order and assume little-endian hosts");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

/// Little-endian append-only byte buffer.
class ByteWriter {
public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto *p = reinterpret_cast<const std::uint8_t *>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }
  void put_raw(const void *data, std::size_t n) {
    const auto *p = static_cast<const std::uint8_t *>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  /// u32 length prefix followed by the bytes.
  void put_string(const std::string &s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_raw(s.data(), s.size());
  }
  /// Appends CRC-32 of everything written so far and returns the buffer.
  std::vector<std::uint8_t> finish_with_crc() && {
    put(crc32_of(buf_));
    return std::move(buf_);
  }
  const std::vector<std::uint8_t> &bytes() const { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_)
      throw FormatError("unexpected end of data");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    auto s = take(n);
    return {s.begin(), s.end()};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Checks magic, version and trailing CRC of a framed file; returns the payload
/// (everything between the version field and the CRC).
inline std::span<const std::uint8_t> open_framed(std::span<const std::uint8_t> bytes,
                                                 const char (&magic)[5],
                                                 std::uint16_t expected_version,
                                                 const std::string &what) {
  constexpr std::size_t header = 4 + sizeof(std::uint16_t);
  if (bytes.size() < header + sizeof(std::uint32_t))
    throw TruncatedError(what + ": file too short");
  if (std::memcmp(bytes.data(), magic, 4) != 0)
    throw FormatError(what + ": bad magic bytes");
  std::uint16_t version;
  std::memcpy(&version, bytes.data() + 4, sizeof version);
  if (version != expected_version)
    throw VersionMismatchError(what + ": format version " + std::to_string(version) +
                               ", expected " + std::to_string(expected_version));
  const auto body = bytes.first(bytes.size() - sizeof(std::uint32_t));
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
  if (crc32_of(body) != stored)
    throw ChecksumError(what + ": checksum mismatch (file truncated or corrupted)");
  return body.subspan(header);
}

} // namespace lesionsynth

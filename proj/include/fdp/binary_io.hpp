#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fdp {

using Bytes = std::vector<std::uint8_t>;

/// Little-endian serializer; doubles are written as their IEEE-754 bit pattern.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void f64s(std::span<const double> v);
  void str(std::string_view s);
  void raw(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  [[nodiscard]] const Bytes& bytes() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  Bytes buf_;
};

/// Reads what ByteWriter wrote; any read past the end throws CorruptionError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  void f64s(std::span<double> out);
  std::string str();

  [[nodiscard]] std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

 private:
  void need(std::size_t n) const;
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

using Magic = std::array<char, 4>;
inline constexpr Magic kCheckpointMagic{'F', 'D', 'P', 'C'};
inline constexpr Magic kDatasetMagic{'F', 'D', 'P', 'D'};
inline constexpr Magic kTraceMagic{'F', 'D', 'P', 'T'};

std::uint32_t crc32(std::span<const std::uint8_t> data);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string content_hash(std::span<const std::uint8_t> data);
std::string content_hash(std::string_view text);

/// magic | version u32 | payload | crc32 of everything before it.
Bytes frame_container(const Magic& magic, std::uint32_t version, std::span<const std::uint8_t> payload);
/// Validates framing and returns the payload. Wrong magic or version throws
/// FormatError; short input or CRC mismatch throws CorruptionError.
Bytes unframe_container(std::span<const std::uint8_t> file, const Magic& magic, std::uint32_t version);

/// Writes to a sibling temp file then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
Bytes read_file(const std::filesystem::path& path);

}  // namespace fdp

#pragma once

// Little-endian binary encoding shared by checkpoint and dataset files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace milr::io {

class ByteWriter {
 public:
  void bytes(std::string_view raw);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> values);
  void str(std::string_view s);  // u32 length + bytes

  const std::vector<std::uint8_t>& buffer() const { return buffer_; }

 private:
  std::vector<std::uint8_t> buffer_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> buffer, std::string source);

  /// Reads `n` raw bytes.
  std::string bytes(std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::string str();

  bool at_end() const { return pos_ == buffer_.size(); }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n) const;

  std::vector<std::uint8_t> buffer_;
  std::string source_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes);

/// FNV-1a over the bytes; used to compare checkpoints cheaply.
std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

}  // namespace milr::io

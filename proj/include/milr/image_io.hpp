#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace milr {

/// 8-bit interleaved RGB raster.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

/// Decodes any PNG libpng understands into 8-bit RGB. Throws IoError naming
/// the file on failure.
RgbImage read_png(const std::filesystem::path& path);

/// Writes an 8-bit RGB PNG with fixed encoder settings, so equal images give
/// equal bytes. Throws IoError on failure.
void write_png(const RgbImage& image, const std::filesystem::path& path);

}  // namespace milr

#pragma once

// Heat maps and blended overlays of information maps.
//
// A map is normalized on its own range, upsampled to image resolution and
// passed through a fixed blue -> green -> red colormap; high values render
// red. Per-map normalization means two heat maps cannot be compared by
// intensity.

#include <filesystem>
#include <vector>

#include "milr/image_io.hpp"
#include "milr/milr.hpp"
#include "milr/tensor.hpp"

namespace milr {

struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// (v - min) / (max - min); all zeros when the map is constant. Throws
/// ContractError on non-finite values.
Grid normalize_map(const InfoMap& map);
Grid normalize_grid(const Grid& grid);

/// Bilinear resampling with align-corners false (pixel centres). Throws
/// DimensionError when the target is smaller than the source.
Grid upsample_bilinear(const Grid& grid, std::size_t height, std::size_t width);

/// Piecewise-linear colormap through 0 -> (0,0,255), 0.5 -> (0,255,0),
/// 1 -> (255,0,0), rounded half away from zero. Throws ContractError on
/// values outside [0, 1].
RgbImage colorize(const Grid& grid);

struct RenderedImage {
  RgbImage image;
  std::size_t sample_id = 0;
  MapKind kind = MapKind::total;
  double lambda = 1.0;
};

/// round((1 - lambda) * original + lambda * heat) per channel. Throws
/// ConfigError when lambda is outside [0, 1] and DimensionError when the
/// images differ in size.
RgbImage blend(const RgbImage& original, const RgbImage& heat, double lambda);

/// Heat map of `map` at height x width. Redundancy maps are clamped at 0
/// before normalization.
RgbImage render_heat(const InfoMap& map, std::size_t height, std::size_t width);

/// The heat map blended over `original`.
RenderedImage render_mix(const RgbImage& original, const InfoMap& map,
                         double lambda);

/// [3,H,W] tensor in [0,1] -> 8-bit RGB (values clamped, then rounded).
RgbImage to_rgb(const Tensor& image);

void write_png(const RenderedImage& image, const std::filesystem::path& path);

}  // namespace milr

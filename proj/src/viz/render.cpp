#include <algorithm>
#include <cmath>

#include "milr/errors.hpp"
#include "milr/viz.hpp"

namespace milr {
namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
}

}  // namespace

Grid normalize_grid(const Grid& grid) {
  if (grid.values.empty() || grid.values.size() != grid.height * grid.width) {
    throw DimensionError("normalize: grid values do not match its shape");
  }
  for (double v : grid.values) {
    if (!std::isfinite(v)) throw ContractError("normalize: map holds a non-finite value");
  }
  const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
  const double min = *lo;
  const double range = *hi - *lo;
  Grid out{grid.height, grid.width, std::vector<double>(grid.values.size(), 0.0)};
  if (range > 0.0) {
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] = (grid.values[i] - min) / range;
    }
  }
  return out;
}

Grid normalize_map(const InfoMap& map) {
  return normalize_grid(Grid{map.height, map.width, map.values});
}

Grid upsample_bilinear(const Grid& grid, std::size_t height, std::size_t width) {
  if (grid.values.empty() || grid.values.size() != grid.height * grid.width) {
    throw DimensionError("upsample: grid values do not match its shape");
  }
  if (height < grid.height || width < grid.width) {
    throw DimensionError("upsample: target " + std::to_string(height) + "x" +
                         std::to_string(width) + " smaller than source " +
                         std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const auto source = [](std::size_t dst, std::size_t in, std::size_t out,
                         std::size_t& i0, std::size_t& i1, double& frac) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                         static_cast<double>(out) -
                     0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, in - 1);
    frac = c - static_cast<double>(i0);
  };
  Grid out{height, width, std::vector<double>(height * width)};
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double wy;
    source(y, grid.height, height, y0, y1, wy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double wx;
      source(x, grid.width, width, x0, x1, wx);
      const double top = (1.0 - wx) * grid.at(y0, x0) + wx * grid.at(y0, x1);
      const double bottom = (1.0 - wx) * grid.at(y1, x0) + wx * grid.at(y1, x1);
      out.values[y * width + x] = (1.0 - wy) * top + wy * bottom;
    }
  }
  return out;
}

RgbImage colorize(const Grid& grid) {
  RgbImage img{grid.height, grid.width, std::vector<std::uint8_t>(grid.values.size() * 3)};
  for (std::size_t i = 0; i < grid.values.size(); ++i) {
    const double v = grid.values[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("colorize: value " + std::to_string(v) + " outside [0,1]");
    }
    double r, g, b;
    if (v <= 0.5) {
      const double t = v / 0.5;
      r = 0.0;
      g = 255.0 * t;
      b = 255.0 * (1.0 - t);
    } else {
      const double t = (v - 0.5) / 0.5;
      r = 255.0 * t;
      g = 255.0 * (1.0 - t);
      b = 0.0;
    }
    img.pixels[i * 3] = to_byte(r);
    img.pixels[i * 3 + 1] = to_byte(g);
    img.pixels[i * 3 + 2] = to_byte(b);
  }
  return img;
}

RgbImage blend(const RgbImage& original, const RgbImage& heat, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConfigError("blend: lambda must lie in [0,1]");
  }
  if (original.height != heat.height || original.width != heat.width ||
      original.pixels.size() != heat.pixels.size()) {
    throw DimensionError("blend: images differ in size");
  }
  RgbImage out{original.height, original.width,
               std::vector<std::uint8_t>(original.pixels.size())};
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = to_byte((1.0 - lambda) * original.pixels[i] + lambda * heat.pixels[i]);
  }
  return out;
}

RgbImage render_heat(const InfoMap& map, std::size_t height, std::size_t width) {
  const InfoMap& source = map.kind == MapKind::redundant ? clamp_nonnegative(map) : map;
  return colorize(upsample_bilinear(normalize_map(source), height, width));
}

RenderedImage render_mix(const RgbImage& original, const InfoMap& map, double lambda) {
  RenderedImage r;
  r.image = blend(original, render_heat(map, original.height, original.width), lambda);
  r.sample_id = map.sample_id;
  r.kind = map.kind;
  r.lambda = lambda;
  return r;
}

RgbImage to_rgb(const Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw DimensionError("to_rgb expects a [3,H,W] image");
  }
  const std::size_t h = image.size(1);
  const std::size_t w = image.size(2);
  const auto v = image.data();
  RgbImage out{h, w, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t p = 0; p < h * w; ++p) {
      out.pixels[p * 3 + c] = to_byte(std::clamp(v[c * h * w + p], 0.0, 1.0) * 255.0);
    }
  }
  return out;
}

void write_png(const RenderedImage& image, const std::filesystem::path& path) {
  write_png(image.image, path);
}

}  // namespace milr

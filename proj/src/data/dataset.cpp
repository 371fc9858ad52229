#include <algorithm>
#include <array>
#include <cmath>

#include "milr/binary_io.hpp"
#include "milr/data.hpp"
#include "milr/errors.hpp"
#include "milr/image_io.hpp"

namespace milr {
namespace {

constexpr std::string_view kDatasetMagic = "MILRDSET";
constexpr std::uint32_t kDatasetVersion = 1;

using Rgb = std::array<double, 3>;

constexpr std::array<Rgb, kGlyphColours> kPalette = {{
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.80, 0.20},  // green
    {0.20, 0.35, 0.95},  // blue
    {0.95, 0.85, 0.10},  // yellow
    {0.85, 0.20, 0.85},  // magenta
    {0.10, 0.85, 0.85},  // cyan
    {1.00, 0.55, 0.05},  // orange
}};

bool glyph_pixel(GlyphShape shape, std::size_t i, std::size_t j,
                 std::size_t size) {
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double di = static_cast<double>(i) - c;
  const double dj = static_cast<double>(j) - c;
  switch (shape) {
    case GlyphShape::square:
      return i >= 1 && j >= 1 && i + 2 <= size && j + 2 <= size;
    case GlyphShape::cross:
      return std::abs(di) <= 1.0 || std::abs(dj) <= 1.0;
    case GlyphShape::triangle:
      return i >= 1 && std::abs(dj) <= static_cast<double>(i) / 2.0;
    case GlyphShape::ring: {
      const double r = std::sqrt(di * di + dj * dj);
      return r >= 2.0 && r <= 3.6;
    }
    case GlyphShape::stripe:
      return i % 2 == 0;
  }
  return false;
}

// Glyph tile colour at (i, j): class colour on the shape, black elsewhere.
Rgb glyph_colour(const GlyphCode& code, std::size_t i, std::size_t j,
                 std::size_t size) {
  return glyph_pixel(code.shape, i, j, size) ? kPalette[code.colour]
                                             : Rgb{0.0, 0.0, 0.0};
}

double distractor_value(std::size_t i, std::size_t j) {
  return ((i / 2 + j / 2) % 2 == 0) ? 1.0 : 0.0;
}

bool boxes_disjoint(std::size_t ay, std::size_t ax, std::size_t as,
                    std::size_t by, std::size_t bx, std::size_t bs) {
  return ax + as <= bx || bx + bs <= ax || ay + as <= by || by + bs <= ay;
}

}  // namespace

GlyphCode glyph_code(std::size_t class_id) {
  const std::size_t s = class_id % kGlyphShapes;
  const std::size_t a = class_id / kGlyphShapes;
  return {static_cast<GlyphShape>(s), (6 * a + s) % kGlyphColours};
}

bool Dataset::has_masks() const {
  return !samples.empty() && !samples.front().relevance_mask.empty();
}

std::vector<std::vector<std::size_t>> Dataset::indices_by_class() const {
  std::vector<std::vector<std::size_t>> out(n_classes());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.at(samples[i].label).push_back(i);
  }
  return out;
}

Tensor Dataset::stack(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DimensionError("Dataset::stack: empty batch");
  const std::size_t per = channels * height * width;
  std::vector<double> values;
  values.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    if (i >= samples.size()) throw DimensionError("Dataset::stack: bad index");
    const auto d = samples[i].image.data();
    values.insert(values.end(), d.begin(), d.end());
  }
  return Tensor({indices.size(), channels, height, width}, std::move(values));
}

Dataset generate_dataset(std::size_t n_classes, std::size_t samples_per_class,
                         std::size_t image_size, double noise_level,
                         std::uint64_t seed, SyntheticGeometry geometry) {
  if (n_classes < 5 || n_classes > kMaxSyntheticClasses) {
    throw ConfigError("generate_dataset: n_classes must be in [5, " +
                      std::to_string(kMaxSyntheticClasses) + "]");
  }
  if (samples_per_class == 0) {
    throw ConfigError("generate_dataset: samples_per_class must be positive");
  }
  if (image_size < 16) {
    throw ConfigError("generate_dataset: image_size must be at least 16");
  }
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) {
    throw ConfigError("generate_dataset: noise_level must lie in [0, 1]");
  }
  const std::size_t g = geometry.glyph_size;
  const std::size_t d = geometry.distractor_size;
  if (g == 0 || d == 0 || g > image_size || d > image_size ||
      g + d > image_size) {
    throw GenerationError(
        "generate_dataset: a " + std::to_string(g) + "px glyph and a " +
        std::to_string(d) + "px distractor cannot be placed disjointly in a " +
        std::to_string(image_size) + "px image");
  }

  Dataset ds;
  ds.channels = 3;
  ds.height = image_size;
  ds.width = image_size;
  for (std::size_t c = 0; c < n_classes; ++c) {
    ds.class_names.push_back("class_" + std::to_string(c));
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> glyph_pos(0, image_size - g);
  const std::size_t plane = image_size * image_size;
  std::vector<std::pair<std::size_t, std::size_t>> candidates;

  for (std::size_t c = 0; c < n_classes; ++c) {
    const GlyphCode code = glyph_code(c);
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      std::vector<double> px(3 * plane);
      for (double& v : px) v = 0.5 + noise_level * (unit(rng) - 0.5);

      std::size_t gy = 0, gx = 0;
      candidates.clear();
      for (int attempt = 0; candidates.empty(); ++attempt) {
        if (attempt == 1000) {
          throw GenerationError("generate_dataset: no disjoint placement found");
        }
        gy = glyph_pos(rng);
        gx = glyph_pos(rng);
        for (std::size_t y = 0; y + d <= image_size; ++y) {
          for (std::size_t x = 0; x + d <= image_size; ++x) {
            if (boxes_disjoint(gy, gx, g, y, x, d)) candidates.emplace_back(y, x);
          }
        }
      }
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      const auto [dy, dx] = candidates[pick(rng)];

      Sample sample;
      sample.id = ds.samples.size();
      sample.label = c;
      sample.relevance_mask.assign(plane, 0);
      sample.distractor_mask.assign(plane, 0);
      for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < g; ++j) {
          const std::size_t p = (gy + i) * image_size + gx + j;
          const Rgb col = glyph_colour(code, i, j, g);
          for (std::size_t ch = 0; ch < 3; ++ch) px[ch * plane + p] = col[ch];
          sample.relevance_mask[p] = 1;
        }
      }
      for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t p = (dy + i) * image_size + dx + j;
          const double v = distractor_value(i, j);
          for (std::size_t ch = 0; ch < 3; ++ch) px[ch * plane + p] = v;
          sample.distractor_mask[p] = 1;
        }
      }
      sample.image = Tensor({3, image_size, image_size}, std::move(px));
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

std::size_t decode_glyph(const Sample& sample, std::size_t n_classes,
                         std::size_t glyph_size) {
  const auto& mask = sample.relevance_mask;
  const Shape& shape = sample.image.shape();
  if (mask.empty() || shape.size() != 3 || shape[0] != 3) return n_classes;
  const std::size_t h = shape[1];
  const std::size_t w = shape[2];
  // top-left corner of the relevance box
  std::size_t top = h, left = w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (mask[y * w + x]) {
        top = std::min(top, y);
        left = std::min(left, x);
      }
    }
  }
  if (top + glyph_size > h || left + glyph_size > w) return n_classes;
  const auto px = sample.image.data();
  for (std::size_t c = 0; c < n_classes; ++c) {
    const GlyphCode code = glyph_code(c);
    bool match = true;
    for (std::size_t i = 0; i < glyph_size && match; ++i) {
      for (std::size_t j = 0; j < glyph_size && match; ++j) {
        const Rgb want = glyph_colour(code, i, j, glyph_size);
        const std::size_t p = (top + i) * w + left + j;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          if (px[ch * h * w + p] != want[ch]) match = false;
        }
      }
    }
    if (match) return c;
  }
  return n_classes;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Episode::all_samples() const {
  std::vector<std::size_t> out = support;
  out.insert(out.end(), query.begin(), query.end());
  return out;
}

Episode sample_episode(const std::vector<std::vector<std::size_t>>& by_class,
                       std::size_t n_way, std::size_t k_shot,
                       std::size_t n_query, std::mt19937_64& rng) {
  if (n_way == 0 || k_shot == 0 || n_query == 0) {
    throw SamplingError("sample_episode: n_way, k_shot and n_query must be positive");
  }
  const std::size_t per_class = k_shot + n_query;
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() >= per_class) eligible.push_back(c);
  }
  if (eligible.size() < n_way) {
    throw SamplingError("sample_episode: need " + std::to_string(n_way) +
                        " classes with at least " + std::to_string(per_class) +
                        " samples, found " + std::to_string(eligible.size()));
  }
  // partial Fisher-Yates: first n_way entries are a uniform draw
  for (std::size_t i = 0; i < n_way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  ep.classes.assign(eligible.begin(), eligible.begin() + n_way);
  std::vector<std::vector<std::size_t>> drawn;
  for (std::size_t c : ep.classes) {
    std::vector<std::size_t> pool = by_class[c];
    for (std::size_t i = 0; i < per_class; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(per_class);
    drawn.push_back(std::move(pool));
  }
  for (std::size_t w = 0; w < n_way; ++w) {
    for (std::size_t i = 0; i < k_shot; ++i) {
      ep.support.push_back(drawn[w][i]);
      ep.support_labels.push_back(ep.classes[w]);
    }
  }
  for (std::size_t w = 0; w < n_way; ++w) {
    for (std::size_t i = k_shot; i < per_class; ++i) {
      ep.query.push_back(drawn[w][i]);
      ep.query_labels.push_back(ep.classes[w]);
    }
  }
  return ep;
}

Episode sample_episode(const Dataset& dataset, std::size_t n_way,
                       std::size_t k_shot, std::size_t n_query,
                       std::mt19937_64& rng) {
  return sample_episode(dataset.indices_by_class(), n_way, k_shot, n_query, rng);
}

// ---------------------------------------------------------------------------

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.bytes(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(dataset.channels));
  w.u32(static_cast<std::uint32_t>(dataset.height));
  w.u32(static_cast<std::uint32_t>(dataset.width));
  w.u32(static_cast<std::uint32_t>(dataset.n_classes()));
  for (const auto& name : dataset.class_names) w.str(name);
  w.u64(dataset.samples.size());
  const bool masks = dataset.has_masks();
  w.u8(masks ? 1 : 0);
  for (const Sample& s : dataset.samples) {
    w.u64(s.id);
    w.u32(static_cast<std::uint32_t>(s.label));
    w.f64s(s.image.data());
    if (masks) {
      for (std::uint8_t m : s.relevance_mask) w.u8(m);
      for (std::uint8_t m : s.distractor_mask) w.u8(m);
    }
  }
  io::write_file(path, w.buffer());
}

Dataset load_dataset(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.string());
  const std::string& src = r.source();
  if (r.bytes(kDatasetMagic.size()) != kDatasetMagic) {
    throw IoError(src + ": not a dataset file");
  }
  if (const std::uint32_t v = r.u32(); v != kDatasetVersion) {
    throw IoError(src + ": unsupported dataset version " + std::to_string(v));
  }
  Dataset ds;
  ds.channels = r.u32();
  ds.height = r.u32();
  ds.width = r.u32();
  const std::uint32_t n_classes = r.u32();
  if (ds.channels == 0 || ds.height == 0 || ds.width == 0 || n_classes == 0) {
    throw IoError(src + ": empty dataset header");
  }
  for (std::uint32_t c = 0; c < n_classes; ++c) ds.class_names.push_back(r.str());
  const std::uint64_t n = r.u64();
  const bool masks = r.u8() != 0;
  const std::size_t plane = ds.height * ds.width;
  for (std::uint64_t i = 0; i < n; ++i) {
    Sample s;
    s.id = r.u64();
    s.label = r.u32();
    if (s.label >= n_classes) throw IoError(src + ": label out of range");
    s.image = Tensor({ds.channels, ds.height, ds.width},
                     r.f64s(ds.channels * plane));
    if (masks) {
      s.relevance_mask.resize(plane);
      s.distractor_mask.resize(plane);
      for (auto& m : s.relevance_mask) m = r.u8();
      for (auto& m : s.distractor_mask) m = r.u8();
    }
    ds.samples.push_back(std::move(s));
  }
  if (!r.at_end()) throw IoError(src + ": trailing bytes");
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

// Align-corners-false bilinear resize of an 8-bit RGB raster to [3,S,S] in
// [0,1].
std::vector<double> resize_to_unit(const RgbImage& img, std::size_t size) {
  std::vector<double> out(3 * size * size);
  const double sy = static_cast<double>(img.height) / static_cast<double>(size);
  const double sx = static_cast<double>(img.width) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5,
                                   0.0, static_cast<double>(img.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        const double bot = (1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out[(c * size + y) * size + x] = ((1 - wy) * top + wy * bot) / 255.0;
      }
    }
  }
  return out;
}

}  // namespace

Dataset load_image_folder(const std::filesystem::path& root,
                          std::size_t image_size) {
  namespace fs = std::filesystem;
  if (image_size == 0) throw ConfigError("load_image_folder: image_size must be positive");
  if (!fs::is_directory(root)) {
    throw IngestionError("image folder does not exist: " + root.string());
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) {
    throw IngestionError("no class directories under " + root.string());
  }
  Dataset ds;
  ds.channels = 3;
  ds.height = image_size;
  ds.width = image_size;
  for (const fs::path& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw IngestionError("empty class directory: " + dir.string());
    }
    const std::size_t label = ds.class_names.size();
    ds.class_names.push_back(dir.filename().string());
    for (const fs::path& file : files) {
      RgbImage img;
      try {
        img = read_png(file);
      } catch (const IoError&) {
        throw IngestionError("cannot decode image " + file.string());
      }
      Sample s;
      s.id = ds.samples.size();
      s.label = label;
      s.image = Tensor({3, image_size, image_size}, resize_to_unit(img, image_size));
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace milr

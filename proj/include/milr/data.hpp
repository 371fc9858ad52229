#pragma once

// Synthetic few-shot images with known relevant and redundant regions, the
// N-way K-shot episode sampler, and dataset persistence.
//
// Every synthetic image holds two 8x8 patches on a noisy grey background:
// a class glyph (one of five shapes drawn in a class-fixed colour on black)
// and a checkerboard distractor identical for all classes. The glyph decides
// the class; the distractor is salient but carries no label information.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "milr/tensor.hpp"

namespace milr {

enum class GlyphShape : std::uint8_t { square, cross, triangle, ring, stripe };

inline constexpr std::size_t kGlyphShapes = 5;
inline constexpr std::size_t kGlyphColours = 7;
inline constexpr std::size_t kMaxSyntheticClasses = kGlyphShapes * kGlyphColours;

struct GlyphCode {
  GlyphShape shape;
  std::size_t colour;  // index into the fixed palette
};

/// Deterministic class -> glyph mapping; distinct for every class below
/// kMaxSyntheticClasses.
GlyphCode glyph_code(std::size_t class_id);

struct Sample {
  std::size_t id = 0;
  std::size_t label = 0;
  Tensor image;  // [C,H,W], values in [0,1]
  // Row-major H*W binary masks; empty when the source has no annotations.
  std::vector<std::uint8_t> relevance_mask;
  std::vector<std::uint8_t> distractor_mask;
};

struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t n_classes() const { return class_names.size(); }
  bool has_masks() const;
  /// Sample indices of each class, in dataset order.
  std::vector<std::vector<std::size_t>> indices_by_class() const;
  /// [B,C,H,W] batch of the given sample indices.
  Tensor stack(std::span<const std::size_t> indices) const;
};

struct SyntheticGeometry {
  std::size_t glyph_size = 8;
  std::size_t distractor_size = 8;
};

/// Throws ConfigError for n_classes outside [5, kMaxSyntheticClasses],
/// image_size < 16 or noise_level outside [0,1]; GenerationError when the
/// glyph and distractor cannot be placed disjointly.
Dataset generate_dataset(std::size_t n_classes, std::size_t samples_per_class,
                         std::size_t image_size, double noise_level,
                         std::uint64_t seed, SyntheticGeometry geometry = {});

/// Recovers the class of a synthetic sample from the pixels inside its
/// relevance mask alone. Returns n_classes when nothing matches.
std::size_t decode_glyph(const Sample& sample, std::size_t n_classes,
                         std::size_t glyph_size = 8);

struct Episode {
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::size_t n_query = 0;
  std::vector<std::size_t> classes;  // dataset class ids, episode order
  // Dataset sample indices, class-major in `classes` order.
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::vector<std::size_t> support_labels;  // dataset class ids
  std::vector<std::size_t> query_labels;

  /// support followed by query
  std::vector<std::size_t> all_samples() const;
};

/// Uniform class choice without replacement, then k_shot + n_query distinct
/// samples per class. Throws SamplingError when the dataset is too small.
Episode sample_episode(const Dataset& dataset, std::size_t n_way,
                       std::size_t k_shot, std::size_t n_query,
                       std::mt19937_64& rng);

/// Same, with a precomputed indices_by_class() table.
Episode sample_episode(const std::vector<std::vector<std::size_t>>& by_class,
                       std::size_t n_way, std::size_t k_shot,
                       std::size_t n_query, std::mt19937_64& rng);

/// Layout (little-endian): magic "MILRDSET", u32 version, u32 channels,
/// u32 height, u32 width, u32 n_classes, class names (u32 length + bytes),
/// u64 n_samples, u8 has_masks, then per sample u64 id, u32 label, C*H*W f64
/// pixels and, with masks, H*W u8 relevance + H*W u8 distractor.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Reads root/<class_name>/*.png (classes and files in lexicographic order),
/// resizes bilinearly to image_size x image_size and scales to [0,1].
/// Throws IngestionError naming the offending file or directory.
Dataset load_image_folder(const std::filesystem::path& root,
                          std::size_t image_size);

}  // namespace milr

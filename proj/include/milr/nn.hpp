#pragma once

// Residual convolutional encoder with a tap point.
//
//   images [B,3,S,S]
//     -> stem: 3x3 conv stride 2 + ReLU, 2x2 average pool     [B,stem,S/4,S/4]
//     -> block 0 (stride 1), block 1.. (stride 2 each)
//     -> spatial mean of the last block                       [B,repr_dim]
//
// Each block is relu(skip(x) + scale * conv3x3(relu(conv3x3(x)))). The skip is
// the identity when shape is preserved and a 1x1 strided conv otherwise. The
// learned scalar `scale` replaces batch normalization, so a sample's output
// never depends on the rest of its batch. The output of block `tap_index` is
// the local-feature grid.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "milr/tensor.hpp"

namespace milr {

struct EncoderConfig {
  std::size_t input_channels = 3;
  std::size_t input_size = 32;
  std::size_t stem_channels = 16;
  std::vector<std::size_t> block_channels = {16, 32, 64};
  std::size_t tap_index = 0;
  std::size_t repr_dim = 64;

  void validate() const;  // ConfigError
  /// Side length of the grid produced by block `index`.
  std::size_t grid_size(std::size_t index) const;
  std::size_t tap_channels() const { return block_channels.at(tap_index); }
  std::size_t tap_grid() const { return grid_size(tap_index); }
  /// Closed-form number of reals in the encoder's parameters.
  std::size_t parameter_count() const;
};

struct EncoderOutput {
  Tensor local_features;  // [B, C_tap, h, w]
  Tensor representation;  // [B, repr_dim]
  Tensor final_features;  // [B, repr_dim, h_last, w_last]
};

class Encoder {
 public:
  struct Block {
    Tensor conv1_weight, conv1_bias;
    Tensor conv2_weight, conv2_bias;
    Tensor skip_weight;  // undefined for identity skips
    Tensor scale;        // [1]
    std::size_t stride = 1;
  };

  Encoder() = default;
  Encoder(EncoderConfig config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  EncoderOutput forward(const Tensor& images) const;
  /// Local-feature grid only.
  Tensor forward_to_tap(const Tensor& images) const;
  /// Runs the layers after the tap and pools: [B,C_tap,h,w] -> [B,repr_dim].
  /// forward() is built from the same two halves, so feeding the cached tap
  /// output reproduces the representation bit for bit.
  Tensor forward_from_tap(const Tensor& local_features) const;

  /// Parameters in declaration order (stem, then blocks in order).
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Deep copy: the result owns separate parameter storage.
  Encoder clone() const;

  void freeze();
  bool frozen() const { return frozen_; }

 private:
  Tensor stem(const Tensor& images) const;
  Tensor run_blocks(const Tensor& x, std::size_t first, std::size_t last) const;
  void check_images(const Tensor& images) const;

  EncoderConfig config_;
  Tensor stem_weight_, stem_bias_;
  std::vector<Block> blocks_;
  bool frozen_ = false;

  friend Encoder decode_encoder(std::span<const std::uint8_t>, const std::string&);
};

Encoder build_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Returns a frozen deep copy: no parameter requires gradients.
Encoder freeze(Encoder encoder);

/// Checkpoint layout (little-endian): magic "MILRENC1", u32 version, config
/// block, u64 count, then that many f64 parameter values in declaration order.
std::vector<std::uint8_t> encode_encoder(const Encoder& encoder);
Encoder decode_encoder(std::span<const std::uint8_t> bytes,
                       const std::string& source);
void save_encoder(const Encoder& encoder, const std::filesystem::path& path);
Encoder load_encoder(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Small dense layers shared by the estimator heads.

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor forward(const Tensor& x) const;  // [n, in] -> [n, out]
};

/// Fan-in scaled uniform initialization.
Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

struct Mlp2 {
  Linear hidden;
  Linear output;

  Tensor forward(const Tensor& x) const;  // output(relu(hidden(x)))
};

Mlp2 make_mlp2(std::size_t in, std::size_t hidden, std::size_t out,
               std::mt19937_64& rng);

/// Uniform(-bound, bound) tensor with bound = sqrt(gain / fan_in).
Tensor init_uniform(Shape shape, std::size_t fan_in, double gain,
                    std::mt19937_64& rng, bool requires_grad = true);

void append_parameters(const Linear& layer, std::vector<Tensor>& out);
void append_parameters(const Mlp2& mlp, std::vector<Tensor>& out);

}  // namespace milr

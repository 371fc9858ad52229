#include <cmath>

#include "milr/binary_io.hpp"
#include "milr/errors.hpp"
#include "milr/nn.hpp"

namespace milr {

namespace {
constexpr std::string_view kEncoderMagic = "MILRENC1";
constexpr std::uint32_t kEncoderVersion = 1;
}  // namespace

void EncoderConfig::validate() const {
  if (input_channels == 0 || stem_channels == 0) {
    throw ConfigError("encoder: channel counts must be positive");
  }
  if (block_channels.empty()) {
    throw ConfigError("encoder: at least one block is required");
  }
  for (std::size_t c : block_channels) {
    if (c == 0) throw ConfigError("encoder: block channels must be positive");
  }
  if (tap_index >= block_channels.size()) {
    throw ConfigError("encoder: tap_index " + std::to_string(tap_index) +
                      " out of range for " +
                      std::to_string(block_channels.size()) + " blocks");
  }
  if (repr_dim != block_channels.back()) {
    throw ConfigError("encoder: repr_dim must equal the last block's channels");
  }
  const std::size_t downsample = 4u << (block_channels.size() - 1);
  if (input_size < downsample || input_size % downsample != 0) {
    throw ConfigError("encoder: input_size must be a positive multiple of " +
                      std::to_string(downsample));
  }
}

std::size_t EncoderConfig::grid_size(std::size_t index) const {
  return (input_size / 4) >> index;
}

std::size_t EncoderConfig::parameter_count() const {
  std::size_t n = stem_channels * input_channels * 9 + stem_channels;
  std::size_t in = stem_channels;
  for (std::size_t b = 0; b < block_channels.size(); ++b) {
    const std::size_t out = block_channels[b];
    n += out * in * 9 + out + out * out * 9 + out + 1;
    if (b > 0 || in != out) n += out * in;
    in = out;
  }
  return n;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, double gain,
                    std::mt19937_64& rng, bool requires_grad) {
  const double bound = std::sqrt(gain / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

Encoder::Encoder(EncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  // He-uniform for layers feeding a ReLU.
  constexpr double kGain = 6.0;
  stem_weight_ = init_uniform({config_.stem_channels, config_.input_channels, 3, 3},
                              config_.input_channels * 9, kGain, rng);
  stem_bias_ = Tensor::zeros({config_.stem_channels}, true);
  std::size_t in = config_.stem_channels;
  for (std::size_t b = 0; b < config_.block_channels.size(); ++b) {
    const std::size_t out = config_.block_channels[b];
    Block blk;
    blk.stride = b == 0 ? 1 : 2;
    blk.conv1_weight = init_uniform({out, in, 3, 3}, in * 9, kGain, rng);
    blk.conv1_bias = Tensor::zeros({out}, true);
    blk.conv2_weight = init_uniform({out, out, 3, 3}, out * 9, kGain, rng);
    blk.conv2_bias = Tensor::zeros({out}, true);
    if (blk.stride != 1 || in != out) {
      blk.skip_weight = init_uniform({out, in, 1, 1}, in, 3.0, rng);
    }
    blk.scale = Tensor::full({1}, 0.5, true);
    blocks_.push_back(std::move(blk));
    in = out;
  }
}

Encoder build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  return Encoder(config, seed);
}

void Encoder::check_images(const Tensor& images) const {
  const Shape want = {0, config_.input_channels, config_.input_size,
                      config_.input_size};
  const Shape& got = images.shape();
  if (got.size() != 4 || got[1] != want[1] || got[2] != want[2] ||
      got[3] != want[3]) {
    throw DimensionError("encoder expects images [B," +
                         std::to_string(want[1]) + "," +
                         std::to_string(want[2]) + "," +
                         std::to_string(want[3]) + "], got " +
                         shape_string(got));
  }
}

Tensor Encoder::stem(const Tensor& images) const {
  const Tensor h = relu(conv2d(images, stem_weight_, stem_bias_, {2, 1}));
  return avgpool2d(h, 2);
}

Tensor Encoder::run_blocks(const Tensor& x, std::size_t first,
                           std::size_t last) const {
  Tensor h = x;
  for (std::size_t b = first; b < last; ++b) {
    const Block& blk = blocks_[b];
    const Tensor r = relu(conv2d(h, blk.conv1_weight, blk.conv1_bias,
                                 {blk.stride, 1}));
    const Tensor branch = conv2d(r, blk.conv2_weight, blk.conv2_bias, {1, 1});
    const Tensor skip = blk.skip_weight.defined()
                            ? conv2d(h, blk.skip_weight, Tensor{}, {blk.stride, 0})
                            : h;
    h = relu(skip + branch * blk.scale);
  }
  return h;
}

Tensor Encoder::forward_to_tap(const Tensor& images) const {
  check_images(images);
  return run_blocks(stem(images), 0, config_.tap_index + 1);
}

Tensor Encoder::forward_from_tap(const Tensor& local_features) const {
  const std::size_t g = config_.tap_grid();
  const Shape& s = local_features.shape();
  if (s.size() != 4 || s[1] != config_.tap_channels() || s[2] != g || s[3] != g) {
    throw DimensionError("forward_from_tap expects [B," +
                         std::to_string(config_.tap_channels()) + "," +
                         std::to_string(g) + "," + std::to_string(g) +
                         "], got " + shape_string(s));
  }
  return spatial_mean(
      run_blocks(local_features, config_.tap_index + 1, blocks_.size()));
}

EncoderOutput Encoder::forward(const Tensor& images) const {
  EncoderOutput out;
  out.local_features = forward_to_tap(images);
  out.final_features =
      run_blocks(out.local_features, config_.tap_index + 1, blocks_.size());
  out.representation = spatial_mean(out.final_features);
  return out;
}

std::vector<Tensor> Encoder::parameters() const {
  std::vector<Tensor> p = {stem_weight_, stem_bias_};
  for (const Block& blk : blocks_) {
    p.push_back(blk.conv1_weight);
    p.push_back(blk.conv1_bias);
    p.push_back(blk.conv2_weight);
    p.push_back(blk.conv2_bias);
    if (blk.skip_weight.defined()) p.push_back(blk.skip_weight);
    p.push_back(blk.scale);
  }
  return p;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& t : parameters()) n += t.numel();
  return n;
}

void Encoder::freeze() {
  for (Tensor& t : parameters()) t.set_requires_grad(false);
  frozen_ = true;
}

Encoder Encoder::clone() const {
  Encoder copy = decode_encoder(encode_encoder(*this), "clone");
  if (frozen_) copy.freeze();
  return copy;
}

Encoder freeze(Encoder encoder) {
  Encoder frozen = encoder.clone();
  frozen.freeze();
  return frozen;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_encoder(const Encoder& encoder) {
  const EncoderConfig& c = encoder.config();
  io::ByteWriter w;
  w.bytes(kEncoderMagic);
  w.u32(kEncoderVersion);
  w.u32(static_cast<std::uint32_t>(c.input_channels));
  w.u32(static_cast<std::uint32_t>(c.input_size));
  w.u32(static_cast<std::uint32_t>(c.stem_channels));
  w.u32(static_cast<std::uint32_t>(c.block_channels.size()));
  for (std::size_t ch : c.block_channels) w.u32(static_cast<std::uint32_t>(ch));
  w.u32(static_cast<std::uint32_t>(c.tap_index));
  w.u32(static_cast<std::uint32_t>(c.repr_dim));
  w.u64(encoder.parameter_count());
  for (const Tensor& t : encoder.parameters()) w.f64s(t.data());
  return w.buffer();
}

Encoder decode_encoder(std::span<const std::uint8_t> bytes,
                       const std::string& source) {
  io::ByteReader r({bytes.begin(), bytes.end()}, source);
  if (r.bytes(kEncoderMagic.size()) != kEncoderMagic) {
    throw IoError(source + ": not an encoder checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kEncoderVersion) {
    throw IoError(source + ": unsupported encoder checkpoint version " +
                  std::to_string(version));
  }
  EncoderConfig c;
  c.input_channels = r.u32();
  c.input_size = r.u32();
  c.stem_channels = r.u32();
  const std::uint32_t n_blocks = r.u32();
  if (n_blocks == 0 || n_blocks > 16) throw IoError(source + ": bad block count");
  c.block_channels.clear();
  for (std::uint32_t i = 0; i < n_blocks; ++i) c.block_channels.push_back(r.u32());
  c.tap_index = r.u32();
  c.repr_dim = r.u32();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw IoError(source + ": " + e.what());
  }
  const std::uint64_t count = r.u64();
  if (count != c.parameter_count()) {
    throw IoError(source + ": parameter count does not match configuration");
  }
  Encoder enc(c, 0);
  for (Tensor& t : enc.parameters()) {
    const auto values = r.f64s(t.numel());
    auto dst = t.mutable_data();
    std::copy(values.begin(), values.end(), dst.begin());
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes after parameters");
  return enc;
}

void save_encoder(const Encoder& encoder, const std::filesystem::path& path) {
  io::write_file(path, encode_encoder(encoder));
}

Encoder load_encoder(const std::filesystem::path& path) {
  return decode_encoder(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------

Tensor Linear::forward(const Tensor& x) const {
  return matmul(x, weight) + bias;
}

Linear make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  Linear l;
  l.weight = init_uniform({in, out}, in, 3.0, rng);
  l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Mlp2::forward(const Tensor& x) const {
  return output.forward(relu(hidden.forward(x)));
}

Mlp2 make_mlp2(std::size_t in, std::size_t hidden, std::size_t out,
               std::mt19937_64& rng) {
  return Mlp2{make_linear(in, hidden, rng), make_linear(hidden, out, rng)};
}

void append_parameters(const Linear& layer, std::vector<Tensor>& out) {
  out.push_back(layer.weight);
  out.push_back(layer.bias);
}

void append_parameters(const Mlp2& mlp, std::vector<Tensor>& out) {
  append_parameters(mlp.hidden, out);
  append_parameters(mlp.output, out);
}

}  // namespace milr

#include <doctest.h>

#include <filesystem>
#include <random>

#include "milr/binary_io.hpp"
#include "milr/errors.hpp"
#include "milr/nn.hpp"
#include "../support/oracles.hpp"

using namespace milr;
using milr::testing::random_tensor;
using milr::testing::to_vector;

namespace {

std::vector<double> flat_parameters(const Encoder& e) {
  std::vector<double> out;
  for (const Tensor& t : e.parameters()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

// Counted by hand from the layer list: stem conv, then per block two 3x3
// convs with biases, a scale, and a bias-free 1x1 skip when the shape
// changes.
std::size_t hand_count(const EncoderConfig& c) {
  std::size_t n = c.stem_channels * c.input_channels * 3 * 3 + c.stem_channels;
  std::size_t prev = c.stem_channels;
  for (std::size_t b = 0; b < c.block_channels.size(); ++b) {
    const std::size_t ch = c.block_channels[b];
    n += ch * prev * 9 + ch;
    n += ch * ch * 9 + ch;
    n += 1;
    const bool reshapes = b > 0 || prev != ch;
    if (reshapes) n += ch * prev;
    prev = ch;
  }
  return n;
}

}  // namespace

TEST_CASE("default topology") {
  const EncoderConfig cfg;
  const Encoder e(cfg, 1);
  CHECK(cfg.tap_channels() == 16);
  CHECK(cfg.tap_grid() == 8);
  CHECK(e.parameter_count() == hand_count(cfg));
  CHECK(cfg.parameter_count() == hand_count(cfg));

  std::mt19937_64 rng(2);
  const auto out = e.forward(random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0));
  CHECK(out.local_features.shape() == Shape{2, 16, 8, 8});
  CHECK(out.representation.shape() == Shape{2, 64});
  CHECK(out.final_features.shape() == Shape{2, 64, 2, 2});
}

TEST_CASE("initialization determinism") {
  const EncoderConfig cfg;
  CHECK(flat_parameters(Encoder(cfg, 5)) == flat_parameters(Encoder(cfg, 5)));
  CHECK(flat_parameters(Encoder(cfg, 5)) != flat_parameters(Encoder(cfg, 6)));
}

TEST_CASE("zero image through a zero-bias encoder") {
  const Encoder e(EncoderConfig{}, 3);
  const auto out = e.forward(Tensor::zeros({3, 3, 32, 32}));
  for (std::size_t b = 1; b < 3; ++b) {
    for (std::size_t j = 0; j < 64; ++j) {
      CHECK(out.representation.at({b, j}) == out.representation.at({0, j}));
    }
  }
  for (double v : out.representation.data()) CHECK(v == 0.0);
}

TEST_CASE("representation is the spatial mean of the last block") {
  std::mt19937_64 rng(4);
  const Encoder e(EncoderConfig{}, 4);
  const auto out = e.forward(random_tensor({3, 3, 32, 32}, rng, 0.0, 1.0));
  const auto& f = out.final_features;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t c = 0; c < 64; ++c) {
      long double acc = 0;
      for (std::size_t y = 0; y < f.size(2); ++y) {
        for (std::size_t x = 0; x < f.size(3); ++x) acc += f.at({b, c, y, x});
      }
      acc /= f.size(2) * f.size(3);
      CHECK(std::abs(out.representation.at({b, c}) - double(acc)) < 1e-12);
    }
  }
  // pooling a constant map returns the constant per channel
  const Tensor pooled = spatial_mean(Tensor::full({1, 5, 3, 3}, 0.75));
  for (double v : pooled.data()) CHECK(v == 0.75);
}

TEST_CASE("no cross-sample dependence") {
  std::mt19937_64 rng(5);
  const Encoder e(EncoderConfig{}, 5);
  const Tensor a = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  const Tensor b = random_tensor({3, 3, 32, 32}, rng, 0.0, 1.0);
  const auto ra = to_vector(e.forward(a).representation);
  const auto rb = to_vector(e.forward(b).representation);
  auto joined = ra;
  joined.insert(joined.end(), rb.begin(), rb.end());
  CHECK(to_vector(e.forward(concat({a, b})).representation) == joined);
}

TEST_CASE("forward splits at the tap without changing a bit") {
  std::mt19937_64 rng(6);
  const Encoder e(EncoderConfig{}, 6);
  const Tensor img = random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  const auto out = e.forward(img);
  CHECK(to_vector(e.forward_to_tap(img)) == to_vector(out.local_features));
  CHECK(to_vector(e.forward_from_tap(out.local_features)) == to_vector(out.representation));
}

TEST_CASE("shapes follow the config for random configs") {
  std::mt19937_64 rng(7);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  for (int trial = 0; trial < 25; ++trial) {
    EncoderConfig cfg;
    cfg.input_channels = pick(1, 3);
    cfg.stem_channels = pick(1, 8);
    cfg.block_channels.clear();
    const std::size_t blocks = pick(1, 3);
    for (std::size_t b = 0; b < blocks; ++b) cfg.block_channels.push_back(pick(1, 8));
    cfg.repr_dim = cfg.block_channels.back();
    cfg.tap_index = pick(0, blocks - 1);
    cfg.input_size = (4u << (blocks - 1)) * pick(1, 3);
    CAPTURE(trial);
    const Encoder e(cfg, trial);
    CHECK(e.parameter_count() == hand_count(cfg));
    const auto out = e.forward(random_tensor({2, cfg.input_channels, cfg.input_size, cfg.input_size}, rng));
    const std::size_t tap = (cfg.input_size / 4) >> cfg.tap_index;
    const std::size_t last = (cfg.input_size / 4) >> (blocks - 1);
    CHECK(out.local_features.shape() == Shape{2, cfg.block_channels[cfg.tap_index], tap, tap});
    CHECK(out.representation.shape() == Shape{2, cfg.repr_dim});
    CHECK(out.final_features.shape() == Shape{2, cfg.repr_dim, last, last});
  }
}

TEST_CASE("invalid configs and inputs") {
  EncoderConfig cfg;
  cfg.tap_index = 3;
  CHECK_THROWS_AS(Encoder(cfg, 0), ConfigError);
  cfg = EncoderConfig{};
  cfg.repr_dim = 10;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.input_size = 20;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  const Encoder e(EncoderConfig{}, 0);
  CHECK_THROWS_AS(e.forward(Tensor::zeros({1, 3, 16, 16})), DimensionError);
  CHECK_THROWS_AS(e.forward(Tensor::zeros({1, 1, 32, 32})), DimensionError);
}

TEST_CASE("freeze returns an independent frozen copy") {
  Encoder e(EncoderConfig{}, 8);
  const Encoder f = freeze(e);
  CHECK(f.frozen());
  CHECK_FALSE(e.frozen());
  for (const Tensor& t : f.parameters()) CHECK_FALSE(t.requires_grad());
  const auto before = flat_parameters(f);
  e.parameters()[0].mutable_data()[0] += 1.0;
  CHECK(flat_parameters(f) == before);
}

TEST_CASE("checkpoint round trip") {
  const Encoder e(EncoderConfig{}, 9);
  const auto bytes = encode_encoder(e);
  const Encoder d = decode_encoder(bytes, "memory");
  CHECK(flat_parameters(d) == flat_parameters(e));
  CHECK(encode_encoder(d) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "milr_encoder_test.bin";
  save_encoder(e, path);
  CHECK(flat_parameters(load_encoder(path)) == flat_parameters(e));
  std::filesystem::remove(path);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(decode_encoder(truncated, "truncated"), IoError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_encoder(bad_magic, "bad"), IoError);
  CHECK_THROWS_AS(load_encoder("/nonexistent/encoder.bin"), IoError);
}

TEST_CASE("linear layers") {
  std::mt19937_64 rng(10);
  const Linear l = make_linear(3, 2, rng);
  CHECK(l.weight.shape() == Shape{3, 2});
  const Tensor x({1, 3}, {1, 0, 0});
  const Tensor y = l.forward(x);
  CHECK(y.at({0, 0}) == l.weight.at({0, 0}) + l.bias.at({0}));
  CHECK(y.at({0, 1}) == l.weight.at({0, 1}) + l.bias.at({1}));
  CHECK_THROWS_AS(l.forward(Tensor::zeros({1, 4})), DimensionError);
}

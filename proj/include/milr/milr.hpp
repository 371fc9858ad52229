#pragma once

// The MI-LR module attached to a frozen encoder.
//
// Stage 1 runs the frozen encoder once and caches, per sample, the local
// feature grid x at the tap and the pooled representation z.
//
// Stage 2 trains three heads against that cache:
//   - a mask network alpha = sigmoid(conv1x1(relu(conv1x1(x)))) giving the
//     occluded features x' = alpha * x;
//   - a critic measuring I(x_i; z) with InfoNCE on the unmasked x;
//   - a bottleneck head p(z | x'_i) whose KL to N(0, I) bounds the
//     information surviving the mask.
//
// The mask is pushed by the task loss of the frozen remainder of the
// network applied to x' (giving z'), and by beta * KL. The bottleneck head
// itself is fitted by Gaussian likelihood of a whitened z given x' (with x'
// detached), so its KL tracks what x' actually says about z rather than
// whatever the mask would like it to say.
//
// Maps per sample on the tap grid:
//   total      per-location InfoNCE log-ratio term
//   decision   per-location KL of the bottleneck on x'
//   redundant  total - decision

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "milr/data.hpp"
#include "milr/estimators.hpp"
#include "milr/nn.hpp"
#include "milr/protonet.hpp"

namespace milr {

enum class MaskMode : std::uint8_t { learned, ones, zeros };

struct MaskNetwork {
  Tensor conv1_weight;  // [hidden, C, 1, 1]
  Tensor conv1_bias;    // [hidden]
  Tensor conv2_weight;  // [C, hidden, 1, 1]
  Tensor conv2_bias;    // [C]
  MaskMode mode = MaskMode::learned;

  /// [K,C,h,w] -> alpha of the same shape. `ones` and `zeros` pin alpha
  /// exactly and ignore the weights.
  Tensor forward(const Tensor& locals) const;
  std::vector<Tensor> parameters() const;
};

/// The output bias starts at `open_bias` so the initial mask is mostly open.
MaskNetwork make_mask_network(std::size_t channels, std::size_t hidden,
                              std::mt19937_64& rng, double open_bias = 2.0);

/// Elementwise x * alpha. Throws DimensionError on shape mismatch.
Tensor apply_mask(const Tensor& locals, const Tensor& alpha);

/// Affine map from z to the bottleneck target: the leading principal
/// directions of the cached representations, scaled to unit variance.
struct TargetTransform {
  Tensor mean;        // [d]
  Tensor projection;  // [d, d_b]

  Tensor apply(const Tensor& reprs) const;  // [K,d] -> [K,d_b]
};

/// Throws EstimationError when the representations have fewer than
/// `target_dim` directions of non-negligible variance.
TargetTransform fit_target_transform(const Tensor& reprs, std::size_t target_dim);

struct MilrConfig {
  double alpha_weight = 1.0;
  double beta_weight = 0.01;
  std::size_t episodes = 1000;
  double lr = 1e-3;
  std::size_t score_dim = 64;       // d_s
  std::size_t bottleneck_dim = 32;  // d_b
  std::size_t hidden = 128;         // critic projector width
  std::size_t mask_hidden = 32;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 5;
  MaskMode mask_mode = MaskMode::learned;

  void validate() const;  // ConfigError
};

struct MilrState {
  Critic critic;
  BottleneckHead bottleneck;
  MaskNetwork mask;
  TargetTransform target;
  double alpha_weight = 1.0;
  double beta_weight = 0.01;
  bool trained = false;

  /// Trainable tensors: critic, bottleneck, then mask.
  std::vector<Tensor> parameters() const;
};

/// Fresh heads sized for the encoder's tap and representation.
MilrState make_milr_state(const EncoderConfig& encoder, const MilrConfig& config,
                          TargetTransform target, std::uint64_t seed);

/// Layout (little-endian): magic "MILRSTA1", u32 version, u32 local_dim,
/// repr_dim, hidden, score_dim, bottleneck_dim, mask_hidden, u8 mask mode,
/// u8 trained, f64 alpha_weight, f64 beta_weight, u64 count, then that many
/// f64 values: critic, bottleneck, mask, target mean, target projection.
std::vector<std::uint8_t> encode_milr_state(const MilrState& state);
MilrState decode_milr_state(std::span<const std::uint8_t> bytes,
                            const std::string& source);
void save_milr_state(const MilrState& state, const std::filesystem::path& path);
MilrState load_milr_state(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct CachedFeatures {
  Tensor local_features;  // [C, h, w]
  Tensor representation;  // [d]
};

class FeatureCache {
 public:
  void insert(std::size_t sample_id, CachedFeatures features);
  bool contains(std::size_t sample_id) const;
  const CachedFeatures& at(std::size_t sample_id) const;  // ContractError

  /// [K,C,h,w] and [K,d] stacks in the given order.
  Tensor locals(std::span<const std::size_t> sample_ids) const;
  Tensor representations(std::span<const std::size_t> sample_ids) const;

  std::size_t size() const { return entries_.size(); }
  std::vector<std::size_t> ids() const;
  /// K * (C*h*w + d) for K cached samples.
  std::size_t size_in_reals() const;

 private:
  std::map<std::size_t, CachedFeatures> entries_;
};

/// Runs the frozen encoder over the given dataset indices in chunks of
/// `batch` and caches the tap grid and the representation under each
/// sample's id. Throws ContractError when the encoder is not frozen.
FeatureCache stage1_collect(const Encoder& frozen_encoder, const Dataset& dataset,
                            std::span<const std::size_t> indices,
                            std::size_t batch = 64);

/// Same over every sample of the dataset.
FeatureCache stage1_collect(const Encoder& frozen_encoder, const Dataset& dataset);

struct MilrObjective {
  Tensor loss;       // minimised: task - a*nce + b*kl + fit_nll
  Tensor task_loss;  // l(x) of the episode on z'
  Tensor nce_bound;  // InfoNCE between unmasked x and stage-1 z
  Tensor kl_mean;    // mean per-location KL of the bottleneck on x'
  Tensor fit_nll;    // bottleneck likelihood fit, x' detached
  double total = 0.0;  // -task + a*nce - b*kl, the maximisation target
  double accuracy = 0.0;
  double mean_alpha = 0.0;
};

/// Throws ContractError when an episode sample is missing from the cache or
/// the encoder is not frozen.
MilrObjective milr_objective(const Episode& episode, const Dataset& dataset,
                             const FeatureCache& cache,
                             const Encoder& frozen_encoder, const MilrState& state);

struct MilrLogRow {
  std::size_t step;
  double task_loss;
  double nce_bound;
  double kl_mean;
  double mean_alpha;
};

struct MilrRun {
  MilrState state;
  std::vector<MilrLogRow> log;
};

/// Collects the stage-1 cache, fits the target transform and trains all
/// heads jointly with Adam. The encoder is never written. Throws
/// TrainingError naming the step when the objective becomes non-finite.
MilrRun train_milr(const Dataset& dataset, const Encoder& frozen_encoder,
                   const MilrConfig& config, std::uint64_t seed);

/// CSV with header "step,task_loss,nce_bound,kl_mean,mean_alpha".
void write_milr_log(const std::vector<MilrLogRow>& log,
                    const std::filesystem::path& path);

// ---------------------------------------------------------------------------

enum class MapKind : std::uint8_t { total, decision, redundant };

std::string_view map_kind_name(MapKind kind);

struct InfoMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, nats
  MapKind kind = MapKind::total;
  std::size_t sample_id = 0;

  double mean() const;
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

/// Per-sample total-information maps for one contrast batch: entry k is the
/// map of batch member k. The mean over all values of all returned maps is
/// the InfoNCE bound of that batch.
std::vector<InfoMap> total_information_maps(const MilrState& state,
                                            const FeatureCache& cache,
                                            std::span<const std::size_t> batch);

/// Map of `sample_id` averaged over contrast batches. Each batch is the
/// sample followed by the listed partner ids.
InfoMap total_information_map(const MilrState& state, const FeatureCache& cache,
                              std::size_t sample_id,
                              std::span<const std::vector<std::size_t>> partners);

/// `count` partner lists of `batch - 1` distinct other cached ids each.
std::vector<std::vector<std::size_t>> draw_contrast_partners(
    const FeatureCache& cache, std::size_t sample_id, std::size_t count,
    std::size_t batch, std::mt19937_64& rng);

InfoMap decision_information_map(const MilrState& state, const FeatureCache& cache,
                                 std::size_t sample_id);

/// total - decision; negative values kept. Throws DimensionError on shape
/// mismatch.
InfoMap redundancy_map(const InfoMap& total, const InfoMap& decision);

/// Copy with negative values replaced by 0.
InfoMap clamp_nonnegative(const InfoMap& map);

}  // namespace milr

#pragma once

// Prototypical-network few-shot classifier: class prototypes are mean support
// embeddings, queries are scored by negative squared Euclidean distance.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "milr/data.hpp"
#include "milr/nn.hpp"

namespace milr {

struct PrototypeSet {
  Tensor prototypes;                   // [n_way, d]
  std::vector<std::size_t> class_ids;  // order of first appearance
};

/// Per-class mean of `support_reprs` rows. Throws ContractError unless every
/// class has the same number of rows.
PrototypeSet compute_prototypes(const Tensor& support_reprs,
                                std::span<const std::size_t> support_labels);

/// -||q - p||^2 for every query row and prototype: [Q, n_way].
Tensor prototype_logits(const Tensor& query_reprs, const PrototypeSet& protos);

/// Class probabilities for one query vector [d] -> [n_way].
Tensor classify_query(const Tensor& query_repr, const PrototypeSet& protos);

struct EpisodeResult {
  Tensor loss;  // mean query cross-entropy (scalar, on the tape)
  double accuracy = 0.0;
  Tensor logits;  // [Q, n_way]
};

/// Episode loss from already-computed embeddings.
EpisodeResult episode_loss(const Tensor& support_reprs,
                           std::span<const std::size_t> support_labels,
                           const Tensor& query_reprs,
                           std::span<const std::size_t> query_labels);

/// Embeds support and query in one batch (support rows first).
EpisodeResult episode_loss(const Episode& episode, const Dataset& dataset,
                           const Encoder& encoder);

struct ProtonetConfig {
  std::size_t episodes = 2000;
  std::size_t n_way = 5;
  std::size_t k_shot = 1;
  std::size_t n_query = 5;
  double lr = 1e-3;

  void validate() const;
};

struct ProtonetLogRow {
  std::size_t episode;
  double loss;
  double accuracy;
};

struct ProtonetRun {
  Encoder encoder;
  std::vector<ProtonetLogRow> log;

  /// Mean accuracy over the last `window` episodes.
  double trailing_accuracy(std::size_t window) const;
};

/// Episodic Adam training. Throws TrainingError naming the episode when the
/// loss becomes non-finite.
ProtonetRun train_protonet(const Dataset& dataset,
                           const EncoderConfig& encoder_config,
                           const ProtonetConfig& config, std::uint64_t seed);

/// CSV with header "episode,loss,accuracy".
void write_protonet_log(const std::vector<ProtonetLogRow>& log,
                        const std::filesystem::path& path);

}  // namespace milr

#include "milr/protonet.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>

#include "milr/errors.hpp"
#include "milr/optim.hpp"

namespace milr {

PrototypeSet compute_prototypes(const Tensor& support_reprs,
                                std::span<const std::size_t> support_labels) {
  if (support_reprs.dim() != 2 || support_reprs.size(0) != support_labels.size()) {
    throw DimensionError("compute_prototypes: one label per support row required");
  }
  PrototypeSet set;
  std::vector<std::size_t> counts;
  std::vector<std::size_t> slot(support_labels.size());
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const auto it = std::find(set.class_ids.begin(), set.class_ids.end(),
                              support_labels[i]);
    if (it == set.class_ids.end()) {
      slot[i] = set.class_ids.size();
      set.class_ids.push_back(support_labels[i]);
      counts.push_back(1);
    } else {
      slot[i] = static_cast<std::size_t>(it - set.class_ids.begin());
      ++counts[slot[i]];
    }
  }
  for (std::size_t c : counts) {
    if (c != counts.front()) {
      throw ContractError("compute_prototypes: unbalanced support set");
    }
  }
  const std::size_t n_way = set.class_ids.size();
  const std::size_t n = support_labels.size();
  if (counts.front() == 1) {
    // 1-shot: prototypes are the support rows themselves, reordered.
    std::vector<std::size_t> rows(n_way);
    for (std::size_t i = 0; i < n; ++i) rows[slot[i]] = i;
    set.prototypes = index_select(support_reprs, rows);
    return set;
  }
  std::vector<double> avg(n_way * n, 0.0);
  const double inv = 1.0 / static_cast<double>(counts.front());
  for (std::size_t i = 0; i < n; ++i) avg[slot[i] * n + i] = inv;
  set.prototypes = matmul(Tensor({n_way, n}, std::move(avg)), support_reprs);
  return set;
}

Tensor prototype_logits(const Tensor& query_reprs, const PrototypeSet& protos) {
  if (query_reprs.dim() != 2 || protos.prototypes.dim() != 2 ||
      query_reprs.size(1) != protos.prototypes.size(1)) {
    throw DimensionError("prototype_logits: query and prototype dimensions differ");
  }
  const std::size_t q = query_reprs.size(0);
  const std::size_t n = protos.prototypes.size(0);
  const std::size_t d = query_reprs.size(1);
  const Tensor diff = reshape(query_reprs, {q, 1, d}) -
                      reshape(protos.prototypes, {1, n, d});
  return neg(sum(square(diff), 2));
}

Tensor classify_query(const Tensor& query_repr, const PrototypeSet& protos) {
  if (query_repr.dim() != 1) {
    throw DimensionError("classify_query expects a single [d] vector");
  }
  const Tensor logits =
      prototype_logits(reshape(query_repr, {1, query_repr.size(0)}), protos);
  return reshape(softmax(logits, 1), {protos.class_ids.size()});
}

EpisodeResult episode_loss(const Tensor& support_reprs,
                           std::span<const std::size_t> support_labels,
                           const Tensor& query_reprs,
                           std::span<const std::size_t> query_labels) {
  const PrototypeSet protos = compute_prototypes(support_reprs, support_labels);
  if (query_reprs.dim() != 2 || query_reprs.size(0) != query_labels.size()) {
    throw DimensionError("episode_loss: one label per query row required");
  }
  const std::size_t q = query_labels.size();
  const std::size_t n_way = protos.class_ids.size();
  std::vector<double> onehot(q * n_way, 0.0);
  std::vector<std::size_t> target(q);
  for (std::size_t i = 0; i < q; ++i) {
    const auto it = std::find(protos.class_ids.begin(), protos.class_ids.end(),
                              query_labels[i]);
    if (it == protos.class_ids.end()) {
      throw ContractError("episode_loss: query label missing from support set");
    }
    target[i] = static_cast<std::size_t>(it - protos.class_ids.begin());
    onehot[i * n_way + target[i]] = 1.0;
  }
  EpisodeResult r;
  r.logits = prototype_logits(query_reprs, protos);
  const Tensor logp = log_softmax(r.logits, 1);
  r.loss = scale(sum(mul(logp, Tensor({q, n_way}, std::move(onehot)))),
                 -1.0 / static_cast<double>(q));
  const auto lv = r.logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < q; ++i) {
    const auto row = lv.subspan(i * n_way, n_way);
    const auto best = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
    if (best == target[i]) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(q);
  return r;
}

EpisodeResult episode_loss(const Episode& episode, const Dataset& dataset,
                           const Encoder& encoder) {
  const auto ids = episode.all_samples();
  const Tensor reprs = encoder.forward(dataset.stack(ids)).representation;
  const std::size_t ns = episode.support.size();
  std::vector<std::size_t> srows(ns), qrows(episode.query.size());
  for (std::size_t i = 0; i < ns; ++i) srows[i] = i;
  for (std::size_t i = 0; i < qrows.size(); ++i) qrows[i] = ns + i;
  return episode_loss(index_select(reprs, srows), episode.support_labels,
                      index_select(reprs, qrows), episode.query_labels);
}

void ProtonetConfig::validate() const {
  if (episodes == 0) throw ConfigError("protonet: episodes must be positive");
  if (n_way < 2 || k_shot == 0 || n_query == 0) {
    throw ConfigError("protonet: need n_way >= 2, k_shot >= 1, n_query >= 1");
  }
  if (!(lr > 0.0)) throw ConfigError("protonet: lr must be positive");
}

double ProtonetRun::trailing_accuracy(std::size_t window) const {
  if (log.empty()) return 0.0;
  const std::size_t n = std::min(window, log.size());
  double acc = 0.0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) acc += log[i].accuracy;
  return acc / static_cast<double>(n);
}

ProtonetRun train_protonet(const Dataset& dataset,
                           const EncoderConfig& encoder_config,
                           const ProtonetConfig& config, std::uint64_t seed) {
  config.validate();
  if (dataset.channels != encoder_config.input_channels ||
      dataset.height != encoder_config.input_size ||
      dataset.width != encoder_config.input_size) {
    throw ConfigError("train_protonet: dataset images do not match the encoder input");
  }
  ProtonetRun run{Encoder(encoder_config, seed), {}};
  Adam optimizer(run.encoder.parameters(), AdamConfig{config.lr});
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const auto by_class = dataset.indices_by_class();
  run.log.reserve(config.episodes);
  for (std::size_t e = 0; e < config.episodes; ++e) {
    const Episode ep = sample_episode(by_class, config.n_way, config.k_shot,
                                      config.n_query, rng);
    Tape tape;
    TapeScope scope(tape);
    optimizer.zero_grad();
    try {
      const EpisodeResult r = episode_loss(ep, dataset, run.encoder);
      tape.backward(r.loss);
      run.log.push_back({e, r.loss.item(), r.accuracy});
    } catch (const NumericError& err) {
      throw TrainingError("protonet training diverged at episode " +
                          std::to_string(e) + ": " + err.what());
    }
    optimizer.step();
  }
  return run;
}

void write_protonet_log(const std::vector<ProtonetLogRow>& log,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "episode,loss,accuracy\n" << std::setprecision(17);
  for (const auto& row : log) {
    out << row.episode << ',' << row.loss << ',' << row.accuracy << '\n';
  }
}

}  // namespace milr

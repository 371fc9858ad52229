#include "milr/milr.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "milr/binary_io.hpp"
#include "milr/errors.hpp"
#include "milr/optim.hpp"

namespace milr {
namespace {

constexpr std::string_view kStateMagic = "MILRSTA1";
constexpr std::uint32_t kStateVersion = 1;

Tensor slice_rows(const Tensor& batch, std::size_t row) {
  Shape shape(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(shape);
  const auto v = batch.data();
  return Tensor(std::move(shape),
                std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(row * n),
                                    v.begin() + static_cast<std::ptrdiff_t>((row + 1) * n)));
}

void require_trained(const MilrState& state, const char* what) {
  if (!state.trained) {
    throw ContractError(std::string(what) + ": MI-LR state has not been trained");
  }
}

std::vector<std::size_t> iota(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = begin + i;
  return v;
}

}  // namespace

Tensor MaskNetwork::forward(const Tensor& locals) const {
  if (locals.dim() != 4) throw DimensionError("mask network expects [K,C,h,w]");
  switch (mode) {
    case MaskMode::ones:
      return Tensor::full(locals.shape(), 1.0);
    case MaskMode::zeros:
      return Tensor::zeros(locals.shape());
    case MaskMode::learned:
      break;
  }
  const Tensor h = relu(conv2d(locals, conv1_weight, conv1_bias));
  return sigmoid(conv2d(h, conv2_weight, conv2_bias));
}

std::vector<Tensor> MaskNetwork::parameters() const {
  return {conv1_weight, conv1_bias, conv2_weight, conv2_bias};
}

MaskNetwork make_mask_network(std::size_t channels, std::size_t hidden,
                              std::mt19937_64& rng, double open_bias) {
  if (channels == 0 || hidden == 0) {
    throw ConfigError("mask network: dimensions must be positive");
  }
  MaskNetwork m;
  m.conv1_weight = init_uniform({hidden, channels, 1, 1}, channels, 6.0, rng);
  m.conv1_bias = Tensor::zeros({hidden}, true);
  m.conv2_weight = init_uniform({channels, hidden, 1, 1}, hidden, 1.0, rng);
  m.conv2_bias = Tensor::full({channels}, open_bias, true);
  return m;
}

Tensor apply_mask(const Tensor& locals, const Tensor& alpha) {
  if (locals.shape() != alpha.shape()) {
    throw DimensionError("apply_mask: features " + shape_string(locals.shape()) +
                         " but mask " + shape_string(alpha.shape()));
  }
  return mul(locals, alpha);
}

// ---------------------------------------------------------------------------

Tensor TargetTransform::apply(const Tensor& reprs) const {
  return matmul(reprs - mean, projection);
}

TargetTransform fit_target_transform(const Tensor& reprs, std::size_t target_dim) {
  if (reprs.dim() != 2) throw DimensionError("target transform expects [K,d]");
  const std::size_t k = reprs.size(0);
  const std::size_t d = reprs.size(1);
  if (k < 2) throw EstimationError("target transform needs at least two samples");
  if (target_dim == 0 || target_dim > d) {
    throw ConfigError("bottleneck dimension " + std::to_string(target_dim) +
                      " must lie in [1, " + std::to_string(d) + "]");
  }
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> z(reprs.data().data(), static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(d));
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const Mat centred = z.rowwise() - mu;
  const Eigen::MatrixXd cov =
      (centred.transpose() * centred) / static_cast<double>(k - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) {
    throw EstimationError("target transform: eigendecomposition failed");
  }
  const Eigen::VectorXd& lambda = eig.eigenvalues();  // ascending
  const double top = lambda(static_cast<Eigen::Index>(d - 1));
  std::vector<double> proj(d * target_dim);
  for (std::size_t j = 0; j < target_dim; ++j) {
    const auto col = static_cast<Eigen::Index>(d - 1 - j);
    const double l = lambda(col);
    if (!(top > 0.0) || !(l > 1e-9 * top)) {
      throw EstimationError("target transform: representations span only " +
                            std::to_string(j) + " directions, " +
                            std::to_string(target_dim) + " requested");
    }
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    const double s = 1.0 / std::sqrt(l);
    for (std::size_t i = 0; i < d; ++i) {
      proj[i * target_dim + j] = v(static_cast<Eigen::Index>(i)) * s;
    }
  }
  TargetTransform t;
  t.mean = Tensor({d}, std::vector<double>(mu.data(), mu.data() + d));
  t.projection = Tensor({d, target_dim}, std::move(proj));
  return t;
}

// ---------------------------------------------------------------------------

void MilrConfig::validate() const {
  if (!(alpha_weight >= 0.0) || !std::isfinite(alpha_weight) ||
      !(beta_weight >= 0.0) || !std::isfinite(beta_weight)) {
    throw ConfigError("milr: alpha_weight and beta_weight must be finite and >= 0");
  }
  if (episodes == 0) throw ConfigError("milr: episodes must be positive");
  if (!(lr > 0.0)) throw ConfigError("milr: lr must be positive");
  if (score_dim == 0 || bottleneck_dim == 0 || hidden == 0 || mask_hidden == 0) {
    throw ConfigError("milr: head dimensions must be positive");
  }
  if (n_way < 2 || k_shot == 0 || n_query == 0) {
    throw ConfigError("milr: need n_way >= 2, k_shot >= 1, n_query >= 1");
  }
}

std::vector<Tensor> MilrState::parameters() const {
  std::vector<Tensor> p = critic.parameters();
  for (const Tensor& t : bottleneck.parameters()) p.push_back(t);
  for (const Tensor& t : mask.parameters()) p.push_back(t);
  return p;
}

MilrState make_milr_state(const EncoderConfig& encoder, const MilrConfig& config,
                          TargetTransform target, std::uint64_t seed) {
  config.validate();
  const std::size_t c = encoder.tap_channels();
  if (target.projection.defined() &&
      (target.projection.dim() != 2 || target.projection.size(0) != encoder.repr_dim ||
       target.projection.size(1) != config.bottleneck_dim)) {
    throw DimensionError("milr: target transform does not map repr_dim to d_b");
  }
  std::mt19937_64 rng(seed);
  MilrState s;
  s.critic = make_critic(c, encoder.repr_dim, config.hidden, config.score_dim, rng);
  s.bottleneck = make_bottleneck(c, config.hidden, config.bottleneck_dim, rng);
  s.mask = make_mask_network(c, config.mask_hidden, rng);
  s.mask.mode = config.mask_mode;
  s.target = std::move(target);
  s.alpha_weight = config.alpha_weight;
  s.beta_weight = config.beta_weight;
  return s;
}

std::vector<std::uint8_t> encode_milr_state(const MilrState& s) {
  const std::size_t local_dim = s.critic.local_projector.hidden.weight.size(0);
  const std::size_t repr_dim = s.critic.repr_projector.hidden.weight.size(0);
  const std::size_t hidden = s.critic.local_projector.hidden.weight.size(1);
  const std::size_t score_dim = s.critic.local_projector.output.weight.size(1);
  const std::size_t d_b = s.bottleneck.mean_weight.size(0);
  const std::size_t mask_hidden = s.mask.conv1_weight.size(0);
  std::vector<Tensor> all = s.parameters();
  all.push_back(s.target.mean);
  all.push_back(s.target.projection);
  std::uint64_t count = 0;
  for (const Tensor& t : all) count += t.numel();

  io::ByteWriter w;
  w.bytes(kStateMagic);
  w.u32(kStateVersion);
  for (std::size_t v : {local_dim, repr_dim, hidden, score_dim, d_b, mask_hidden}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.u8(static_cast<std::uint8_t>(s.mask.mode));
  w.u8(s.trained ? 1 : 0);
  w.f64(s.alpha_weight);
  w.f64(s.beta_weight);
  w.u64(count);
  for (const Tensor& t : all) w.f64s(t.data());
  return w.buffer();
}

MilrState decode_milr_state(std::span<const std::uint8_t> bytes,
                            const std::string& source) {
  io::ByteReader r({bytes.begin(), bytes.end()}, source);
  if (r.bytes(kStateMagic.size()) != kStateMagic) {
    throw IoError(source + ": not an MI-LR state checkpoint");
  }
  const std::uint32_t version = r.u32();
  if (version != kStateVersion) {
    throw IoError(source + ": unsupported MI-LR checkpoint version " +
                  std::to_string(version));
  }
  const std::size_t local_dim = r.u32();
  const std::size_t repr_dim = r.u32();
  MilrConfig cfg;
  cfg.hidden = r.u32();
  cfg.score_dim = r.u32();
  cfg.bottleneck_dim = r.u32();
  cfg.mask_hidden = r.u32();
  const std::uint8_t mode = r.u8();
  if (mode > static_cast<std::uint8_t>(MaskMode::zeros)) {
    throw IoError(source + ": invalid mask mode " + std::to_string(mode));
  }
  cfg.mask_mode = static_cast<MaskMode>(mode);
  const bool trained = r.u8() != 0;
  cfg.alpha_weight = r.f64();
  cfg.beta_weight = r.f64();
  if (local_dim == 0 || repr_dim == 0 || cfg.bottleneck_dim > repr_dim) {
    throw IoError(source + ": inconsistent MI-LR dimensions");
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(source + ": " + e.what());
  }
  EncoderConfig shape;
  shape.block_channels = {local_dim, repr_dim};
  shape.tap_index = 0;
  shape.repr_dim = repr_dim;
  MilrState s = make_milr_state(shape, cfg, {}, 0);
  s.target.mean = Tensor::zeros({repr_dim});
  s.target.projection = Tensor::zeros({repr_dim, cfg.bottleneck_dim});
  s.trained = trained;

  std::vector<Tensor> all = s.parameters();
  all.push_back(s.target.mean);
  all.push_back(s.target.projection);
  std::uint64_t expected = 0;
  for (const Tensor& t : all) expected += t.numel();
  const std::uint64_t count = r.u64();
  if (count != expected) {
    throw IoError(source + ": expected " + std::to_string(expected) +
                  " values, header says " + std::to_string(count));
  }
  for (Tensor& t : all) {
    const std::vector<double> v = r.f64s(t.numel());
    for (double x : v) {
      if (!std::isfinite(x)) throw IoError(source + ": non-finite parameter");
    }
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes");
  return s;
}

void save_milr_state(const MilrState& state, const std::filesystem::path& path) {
  io::write_file(path, encode_milr_state(state));
}

MilrState load_milr_state(const std::filesystem::path& path) {
  return decode_milr_state(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------

void FeatureCache::insert(std::size_t sample_id, CachedFeatures features) {
  if (features.local_features.dim() != 3 || features.representation.dim() != 1) {
    throw DimensionError("feature cache expects locals [C,h,w] and repr [d]");
  }
  if (!entries_.empty()) {
    const CachedFeatures& first = entries_.begin()->second;
    if (first.local_features.shape() != features.local_features.shape() ||
        first.representation.shape() != features.representation.shape()) {
      throw DimensionError("feature cache: inconsistent feature shapes");
    }
  }
  entries_.insert_or_assign(sample_id, std::move(features));
}

bool FeatureCache::contains(std::size_t sample_id) const {
  return entries_.count(sample_id) != 0;
}

const CachedFeatures& FeatureCache::at(std::size_t sample_id) const {
  const auto it = entries_.find(sample_id);
  if (it == entries_.end()) {
    throw ContractError("sample " + std::to_string(sample_id) +
                        " has no stage-1 features in the cache");
  }
  return it->second;
}

namespace {

Tensor stack_cached(const FeatureCache& cache, std::span<const std::size_t> ids,
                    bool locals) {
  if (ids.empty()) throw DimensionError("feature cache: empty selection");
  std::vector<double> data;
  Shape shape;
  for (std::size_t id : ids) {
    const CachedFeatures& f = cache.at(id);
    const Tensor& t = locals ? f.local_features : f.representation;
    if (shape.empty()) {
      shape = t.shape();
      data.reserve(ids.size() * t.numel());
    }
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  shape.insert(shape.begin(), ids.size());
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

Tensor FeatureCache::locals(std::span<const std::size_t> sample_ids) const {
  return stack_cached(*this, sample_ids, true);
}

Tensor FeatureCache::representations(std::span<const std::size_t> sample_ids) const {
  return stack_cached(*this, sample_ids, false);
}

std::vector<std::size_t> FeatureCache::ids() const {
  std::vector<std::size_t> out;
  out.reserve(entries_.size());
  for (const auto& [id, f] : entries_) out.push_back(id);
  return out;
}

std::size_t FeatureCache::size_in_reals() const {
  std::size_t n = 0;
  for (const auto& [id, f] : entries_) {
    n += f.local_features.numel() + f.representation.numel();
  }
  return n;
}

FeatureCache stage1_collect(const Encoder& frozen_encoder, const Dataset& dataset,
                            std::span<const std::size_t> indices, std::size_t batch) {
  if (!frozen_encoder.frozen()) {
    throw ContractError("stage-1 collection requires a frozen encoder");
  }
  if (batch == 0) throw ConfigError("stage-1 collection: batch must be positive");
  FeatureCache cache;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
    const EncoderOutput out = frozen_encoder.forward(dataset.stack(chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      cache.insert(dataset.samples.at(chunk[i]).id,
                   {slice_rows(out.local_features, i), slice_rows(out.representation, i)});
    }
  }
  return cache;
}

FeatureCache stage1_collect(const Encoder& frozen_encoder, const Dataset& dataset) {
  const auto all = iota(0, dataset.samples.size());
  return stage1_collect(frozen_encoder, dataset, all);
}

// ---------------------------------------------------------------------------

MilrObjective milr_objective(const Episode& episode, const Dataset& dataset,
                             const FeatureCache& cache,
                             const Encoder& frozen_encoder, const MilrState& state) {
  if (!frozen_encoder.frozen()) {
    throw ContractError("milr_objective requires a frozen encoder");
  }
  const auto indices = episode.all_samples();
  std::vector<std::size_t> ids(indices.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = dataset.samples.at(indices[i]).id;
  const Tensor x = cache.locals(ids);
  const Tensor z = cache.representations(ids);

  MilrObjective o;
  const Tensor alpha = state.mask.forward(x);
  const Tensor masked = apply_mask(x, alpha);

  const Tensor z_masked = frozen_encoder.forward_from_tap(masked);
  const std::size_t ns = episode.support.size();
  const EpisodeResult task =
      episode_loss(index_select(z_masked, iota(0, ns)), episode.support_labels,
                   index_select(z_masked, iota(ns, ids.size())), episode.query_labels);
  o.task_loss = task.loss;
  o.accuracy = task.accuracy;

  o.nce_bound = infonce_lower_bound(score_matrix(state.critic, x, z));
  o.kl_mean = vib_upper_bound(state.bottleneck.detached(), masked).bound;
  o.fit_nll = gaussian_nll(bottleneck_forward(state.bottleneck, masked.detach()),
                           state.target.apply(z));

  o.loss = o.task_loss - scale(o.nce_bound, state.alpha_weight) +
           scale(o.kl_mean, state.beta_weight) + o.fit_nll;
  o.total = -o.task_loss.item() + state.alpha_weight * o.nce_bound.item() -
            state.beta_weight * o.kl_mean.item();
  double a = 0.0;
  for (double v : alpha.data()) a += v;
  o.mean_alpha = a / static_cast<double>(alpha.numel());
  return o;
}

MilrRun train_milr(const Dataset& dataset, const Encoder& frozen_encoder,
                   const MilrConfig& config, std::uint64_t seed) {
  config.validate();
  if (!frozen_encoder.frozen()) {
    throw ContractError("train_milr requires a frozen encoder");
  }
  const EncoderConfig& ec = frozen_encoder.config();
  if (dataset.channels != ec.input_channels || dataset.height != ec.input_size ||
      dataset.width != ec.input_size) {
    throw ConfigError("train_milr: dataset images do not match the encoder input");
  }
  const FeatureCache cache = stage1_collect(frozen_encoder, dataset);
  const auto all_ids = cache.ids();
  TargetTransform target =
      fit_target_transform(cache.representations(all_ids), config.bottleneck_dim);

  MilrRun run{make_milr_state(ec, config, std::move(target), seed), {}};
  Adam optimizer(run.state.parameters(), AdamConfig{config.lr});
  std::mt19937_64 rng(seed ^ 0xd1b54a32d192ed03ULL);
  const auto by_class = dataset.indices_by_class();
  run.log.reserve(config.episodes);
  for (std::size_t step = 0; step < config.episodes; ++step) {
    const Episode ep =
        sample_episode(by_class, config.n_way, config.k_shot, config.n_query, rng);
    Tape tape;
    TapeScope scope(tape);
    optimizer.zero_grad();
    try {
      const MilrObjective o = milr_objective(ep, dataset, cache, frozen_encoder, run.state);
      tape.backward(o.loss);
      run.log.push_back({step, o.task_loss.item(), o.nce_bound.item(),
                         o.kl_mean.item(), o.mean_alpha});
    } catch (const NumericError& err) {
      throw TrainingError("MI-LR training diverged at step " + std::to_string(step) +
                          ": " + err.what());
    } catch (const EstimationError& err) {
      throw TrainingError("MI-LR training diverged at step " + std::to_string(step) +
                          ": " + err.what());
    }
    optimizer.step();
  }
  run.state.trained = true;
  return run;
}

void write_milr_log(const std::vector<MilrLogRow>& log,
                    const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,task_loss,nce_bound,kl_mean,mean_alpha\n" << std::setprecision(17);
  for (const auto& r : log) {
    out << r.step << ',' << r.task_loss << ',' << r.nce_bound << ',' << r.kl_mean
        << ',' << r.mean_alpha << '\n';
  }
}

// ---------------------------------------------------------------------------

std::string_view map_kind_name(MapKind kind) {
  switch (kind) {
    case MapKind::total:
      return "total";
    case MapKind::decision:
      return "decision";
    case MapKind::redundant:
      return "redundant";
  }
  return "unknown";
}

double InfoMap::mean() const {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

std::vector<InfoMap> total_information_maps(const MilrState& state,
                                            const FeatureCache& cache,
                                            std::span<const std::size_t> batch) {
  require_trained(state, "total_information_map");
  const Tensor x = cache.locals(batch);
  const std::size_t h = x.size(2);
  const std::size_t w = x.size(3);
  const Tensor terms =
      infonce_terms(score_matrix(state.critic, x, cache.representations(batch)));
  const auto tv = terms.data();
  std::vector<InfoMap> maps(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    maps[k].height = h;
    maps[k].width = w;
    maps[k].kind = MapKind::total;
    maps[k].sample_id = batch[k];
    maps[k].values.assign(tv.begin() + static_cast<std::ptrdiff_t>(k * h * w),
                          tv.begin() + static_cast<std::ptrdiff_t>((k + 1) * h * w));
  }
  return maps;
}

InfoMap total_information_map(const MilrState& state, const FeatureCache& cache,
                              std::size_t sample_id,
                              std::span<const std::vector<std::size_t>> partners) {
  require_trained(state, "total_information_map");
  if (partners.empty()) {
    throw ConfigError("total_information_map: at least one contrast batch required");
  }
  InfoMap acc;
  for (const auto& others : partners) {
    std::vector<std::size_t> batch{sample_id};
    for (std::size_t id : others) {
      if (id == sample_id) {
        throw ContractError("contrast partners must not include the sample itself");
      }
      batch.push_back(id);
    }
    InfoMap m = std::move(total_information_maps(state, cache, batch).front());
    if (acc.values.empty()) {
      acc = std::move(m);
    } else {
      for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += m.values[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(partners.size());
  if (partners.size() > 1) {
    for (double& v : acc.values) v *= inv;
  }
  return acc;
}

std::vector<std::vector<std::size_t>> draw_contrast_partners(
    const FeatureCache& cache, std::size_t sample_id, std::size_t count,
    std::size_t batch, std::mt19937_64& rng) {
  if (count == 0 || batch == 0) {
    throw ConfigError("contrast batches: count and batch size must be positive");
  }
  std::vector<std::size_t> pool;
  for (std::size_t id : cache.ids()) {
    if (id != sample_id) pool.push_back(id);
  }
  const std::size_t need = batch - 1;
  if (need > pool.size()) {
    throw SamplingError("contrast batch of " + std::to_string(batch) +
                        " needs more cached samples than the " +
                        std::to_string(pool.size() + 1) + " available");
  }
  std::vector<std::vector<std::size_t>> out(count);
  for (auto& partners : out) {
    for (std::size_t i = 0; i < need; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    partners.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(need));
  }
  return out;
}

InfoMap decision_information_map(const MilrState& state, const FeatureCache& cache,
                                 std::size_t sample_id) {
  require_trained(state, "decision_information_map");
  const std::size_t ids[] = {sample_id};
  const Tensor x = cache.locals(ids);
  const Tensor masked = apply_mask(x, state.mask.forward(x));
  const Tensor grid =
      gaussian_kl_grid(bottleneck_forward(state.bottleneck, masked));
  InfoMap m;
  m.height = x.size(2);
  m.width = x.size(3);
  m.kind = MapKind::decision;
  m.sample_id = sample_id;
  m.values.assign(grid.data().begin(), grid.data().end());
  return m;
}

InfoMap redundancy_map(const InfoMap& total, const InfoMap& decision) {
  if (total.height != decision.height || total.width != decision.width ||
      total.values.size() != decision.values.size()) {
    throw DimensionError("redundancy_map: maps have different shapes");
  }
  InfoMap r = total;
  r.kind = MapKind::redundant;
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    r.values[i] = total.values[i] - decision.values[i];
  }
  return r;
}

InfoMap clamp_nonnegative(const InfoMap& map) {
  InfoMap c = map;
  for (double& v : c.values) v = std::max(v, 0.0);
  return c;
}

}  // namespace milr

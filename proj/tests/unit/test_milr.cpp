#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "milr/binary_io.hpp"
#include "milr/errors.hpp"
#include "milr/milr.hpp"
#include "../support/oracles.hpp"

using namespace milr;
using milr::testing::random_tensor;
using milr::testing::to_vector;

namespace {

MilrConfig small_config() {
  MilrConfig c;
  c.score_dim = 16;
  c.hidden = 16;
  c.bottleneck_dim = 8;
  c.mask_hidden = 8;
  c.n_query = 2;
  return c;
}

struct Fixture {
  Dataset ds = generate_dataset(5, 8, 32, 0.5, 21);
  Encoder frozen = freeze(Encoder(EncoderConfig{}, 22));
  FeatureCache cache = stage1_collect(frozen, ds);
  MilrConfig config = small_config();

  MilrState state(std::uint64_t seed = 3) const {
    const auto ids = cache.ids();
    TargetTransform t = fit_target_transform(cache.representations(ids), config.bottleneck_dim);
    return make_milr_state(frozen.config(), config, std::move(t), seed);
  }
};

double sum_of(const InfoMap& m) {
  double s = 0;
  for (double v : m.values) s += v;
  return s;
}

}  // namespace

TEST_CASE("stage-1 cache") {
  const Fixture f;
  REQUIRE(f.cache.size() == f.ds.samples.size());
  CHECK(f.cache.size_in_reals() == f.ds.samples.size() * (16 * 8 * 8 + 64));

  const FeatureCache again = stage1_collect(f.frozen, f.ds);
  for (std::size_t id : f.cache.ids()) {
    CHECK(to_vector(again.at(id).local_features) == to_vector(f.cache.at(id).local_features));
    CHECK(to_vector(again.at(id).representation) == to_vector(f.cache.at(id).representation));
  }

  const std::vector<std::size_t> pick = {3, 17, 30};
  const auto out = f.frozen.forward(f.ds.stack(pick));
  CHECK(to_vector(f.cache.locals(pick)) == to_vector(out.local_features));
  CHECK(to_vector(f.cache.representations(pick)) == to_vector(out.representation));

  // chunking does not change anything
  std::vector<std::size_t> all(f.ds.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const FeatureCache chunked = stage1_collect(f.frozen, f.ds, all, 7);
  for (std::size_t id : f.cache.ids()) {
    CHECK(to_vector(chunked.at(id).local_features) == to_vector(f.cache.at(id).local_features));
  }

  CHECK_THROWS_AS(f.cache.at(999), ContractError);
  CHECK_THROWS_AS(stage1_collect(Encoder(EncoderConfig{}, 1), f.ds), ContractError);
}

TEST_CASE("masking") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 4, 3, 3}, rng);
  CHECK(to_vector(apply_mask(x, Tensor::full(x.shape(), 1.0))) == to_vector(x));
  const Tensor closed = apply_mask(x, Tensor::zeros(x.shape()));
  for (double v : closed.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(apply_mask(x, Tensor::zeros({2, 4, 3, 2})), DimensionError);

  MaskNetwork m = make_mask_network(4, 5, rng);
  const Tensor alpha = m.forward(x);
  CHECK(alpha.shape() == x.shape());
  for (double v : alpha.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  m.mode = MaskMode::ones;
  const Tensor open = m.forward(x);
  for (double v : open.data()) CHECK(v == 1.0);
  m.mode = MaskMode::zeros;
  const Tensor shut = m.forward(x);
  for (double v : shut.data()) CHECK(v == 0.0);
}

TEST_CASE("target transform whitens the fitted representations") {
  std::mt19937_64 rng(2);
  const Tensor z = random_tensor({200, 6}, rng);
  const TargetTransform t = fit_target_transform(z, 4);
  const Tensor w = t.apply(z);
  REQUIRE(w.shape() == Shape{200, 4});
  for (std::size_t a = 0; a < 4; ++a) {
    double mean = 0;
    for (std::size_t r = 0; r < 200; ++r) mean += w.at({r, a});
    CHECK(std::abs(mean / 200) < 1e-12);
    for (std::size_t b = 0; b < 4; ++b) {
      double cov = 0;
      for (std::size_t r = 0; r < 200; ++r) cov += w.at({r, a}) * w.at({r, b});
      CHECK(std::abs(cov / 199 - (a == b ? 1.0 : 0.0)) < 1e-9);
    }
  }
  // rank two data cannot give three directions
  std::vector<double> flat(50 * 5);
  for (std::size_t r = 0; r < 50; ++r) {
    const double u = std::sin(double(r)), v = std::cos(3.0 * r);
    for (std::size_t c = 0; c < 5; ++c) flat[r * 5 + c] = u * (c + 1) + v * (c % 2);
  }
  CHECK_NOTHROW(fit_target_transform(Tensor({50, 5}, flat), 2));
  CHECK_THROWS_AS(fit_target_transform(Tensor({50, 5}, flat), 3), EstimationError);
  CHECK_THROWS_AS(fit_target_transform(z, 7), ConfigError);
}

TEST_CASE("objective") {
  const Fixture f;
  MilrState s = f.state();
  std::mt19937_64 rng(4);
  const Episode ep = sample_episode(f.ds, 5, 1, 2, rng);

  SUBCASE("component identity") {
    const MilrObjective o = milr_objective(ep, f.ds, f.cache, f.frozen, s);
    const double composed = o.task_loss.item() - s.alpha_weight * o.nce_bound.item() +
                            s.beta_weight * o.kl_mean.item() + o.fit_nll.item();
    CHECK(std::abs(o.loss.item() - composed) < 1e-12);
    CHECK(o.total == -o.task_loss.item() + s.alpha_weight * o.nce_bound.item() -
                         s.beta_weight * o.kl_mean.item());
    CHECK(o.mean_alpha > 0.5);
  }
  SUBCASE("zero weights reduce to the episode loss") {
    s.alpha_weight = 0.0;
    s.beta_weight = 0.0;
    const MilrObjective o = milr_objective(ep, f.ds, f.cache, f.frozen, s);
    CHECK(o.total == -o.task_loss.item());
  }
  SUBCASE("identity mask reproduces the frozen episode loss exactly") {
    s.mask.mode = MaskMode::ones;
    s.beta_weight = 0.0;
    const MilrObjective o = milr_objective(ep, f.ds, f.cache, f.frozen, s);
    const EpisodeResult ref = episode_loss(ep, f.ds, f.frozen);
    CHECK(o.task_loss.item() == ref.loss.item());
    CHECK(o.accuracy == ref.accuracy);
    CHECK(o.mean_alpha == 1.0);
  }
  SUBCASE("contract errors") {
    const std::vector<std::size_t> some = {0, 1, 2};
    const FeatureCache partial = stage1_collect(f.frozen, f.ds, some);
    CHECK_THROWS_AS(milr_objective(ep, f.ds, partial, f.frozen, s), ContractError);
    CHECK_THROWS_AS(milr_objective(ep, f.ds, f.cache, Encoder(EncoderConfig{}, 1), s), ContractError);
  }
}

TEST_CASE("maps need a trained state") {
  const Fixture f;
  const MilrState s = f.state();
  const std::vector<std::size_t> batch = {0, 1};
  CHECK_THROWS_AS(total_information_maps(s, f.cache, batch), ContractError);
  CHECK_THROWS_AS(decision_information_map(s, f.cache, 0), ContractError);
}

TEST_CASE("total information maps") {
  const Fixture f;
  MilrState s = f.state();
  s.trained = true;
  const std::vector<std::size_t> batch = {4, 0, 13, 27, 39};

  SUBCASE("batch mean equals the bound") {
    const auto maps = total_information_maps(s, f.cache, batch);
    REQUIRE(maps.size() == 5);
    double acc = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(maps[k].sample_id == batch[k]);
      CHECK(maps[k].height == 8);
      acc += sum_of(maps[k]);
    }
    const double bound = infonce_lower_bound(
        score_matrix(s.critic, f.cache.locals(batch), f.cache.representations(batch))).item();
    CHECK(std::abs(acc / (5 * 64) - bound) < 1e-9);
  }
  SUBCASE("averaging over contrast batches") {
    const std::vector<std::vector<std::size_t>> one = {{0, 13, 27, 39}};
    const InfoMap single = total_information_map(s, f.cache, 4, one);
    CHECK(single.values == total_information_maps(s, f.cache, batch).front().values);

    std::mt19937_64 rng(5);
    const auto partners = draw_contrast_partners(f.cache, 4, 3, 6, rng);
    const InfoMap avg = total_information_map(s, f.cache, 4, partners);
    double expected = 0;
    for (const auto& p : partners) {
      std::vector<std::size_t> b = {4};
      b.insert(b.end(), p.begin(), p.end());
      expected += total_information_maps(s, f.cache, b).front().mean();
    }
    CHECK(std::abs(avg.mean() - expected / 3) < 1e-12);

    const std::vector<std::vector<std::size_t>> self = {{4, 1}};
    CHECK_THROWS_AS(total_information_map(s, f.cache, 4, self), ContractError);
  }
  SUBCASE("zero critic gives an all-zero map") {
    zero_critic(s.critic);
    for (const InfoMap& m : total_information_maps(s, f.cache, batch)) {
      for (double v : m.values) CHECK(std::abs(v) < 1e-12);
    }
  }
}

TEST_CASE("contrast partners") {
  const Fixture f;
  std::mt19937_64 rng(6);
  const auto lists = draw_contrast_partners(f.cache, 7, 4, 10, rng);
  REQUIRE(lists.size() == 4);
  for (const auto& l : lists) {
    CHECK(l.size() == 9);
    std::set<std::size_t> u(l.begin(), l.end());
    CHECK(u.size() == 9);
    CHECK(u.count(7) == 0);
    for (std::size_t id : l) CHECK(f.cache.contains(id));
  }
  CHECK_NOTHROW(draw_contrast_partners(f.cache, 7, 1, f.cache.size(), rng));
  CHECK_THROWS_AS(draw_contrast_partners(f.cache, 7, 1, f.cache.size() + 1, rng), SamplingError);
}

TEST_CASE("decision information map") {
  const Fixture f;
  MilrState s = f.state();
  s.trained = true;
  for (std::size_t id : {0u, 11u, 35u}) {
    const InfoMap m = decision_information_map(s, f.cache, id);
    const std::size_t ids[] = {id};
    const Tensor x = f.cache.locals(ids);
    const double bound = vib_upper_bound(s.bottleneck, apply_mask(x, s.mask.forward(x))).bound.item();
    CHECK(std::abs(m.mean() - bound) < 1e-9);
    CHECK(std::abs(sum_of(m) - 64 * bound) < 1e-9);
    for (double v : m.values) CHECK(v >= 0.0);
  }
  SUBCASE("standard-normal heads") {
    for (Tensor t : {s.bottleneck.mean_weight, s.bottleneck.mean_bias, s.bottleneck.logvar_weight,
                     s.bottleneck.logvar_bias}) {
      for (double& v : t.mutable_data()) v = 0.0;
    }
    for (double v : decision_information_map(s, f.cache, 5).values) CHECK(v == 0.0);
  }
  SUBCASE("closed mask makes the bottleneck input constant") {
    s.mask.mode = MaskMode::zeros;
    const InfoMap a = decision_information_map(s, f.cache, 1);
    const InfoMap b = decision_information_map(s, f.cache, 2);
    CHECK(a.values == b.values);
    for (double v : a.values) CHECK(v == a.values[0]);
  }
}

TEST_CASE("redundancy map") {
  InfoMap total{2, 2, {1.0, 2.0, -0.5, 3.0}, MapKind::total, 9};
  InfoMap decision{2, 2, {0.5, 2.5, 0.0, 1.0}, MapKind::decision, 9};
  const InfoMap r = redundancy_map(total, decision);
  CHECK(r.kind == MapKind::redundant);
  CHECK(r.sample_id == 9);
  CHECK(r.values == std::vector<double>{0.5, -0.5, -0.5, 2.0});
  CHECK(clamp_nonnegative(r).values == std::vector<double>{0.5, 0.0, 0.0, 2.0});
  for (double v : redundancy_map(total, total).values) CHECK(v == 0.0);
  InfoMap zero = decision;
  zero.values.assign(4, 0.0);
  CHECK(redundancy_map(total, zero).values == total.values);
  InfoMap wide{1, 4, {0, 0, 0, 0}, MapKind::decision, 9};
  CHECK_THROWS_AS(redundancy_map(total, wide), DimensionError);
  CHECK(map_kind_name(MapKind::redundant) == "redundant");
}

TEST_CASE("state checkpoint") {
  const Fixture f;
  MilrState s = f.state(8);
  s.trained = true;
  s.beta_weight = 0.25;
  s.mask.mode = MaskMode::ones;
  const auto bytes = encode_milr_state(s);
  const MilrState d = decode_milr_state(bytes, "memory");
  CHECK(encode_milr_state(d) == bytes);
  CHECK(d.trained);
  CHECK(d.beta_weight == 0.25);
  CHECK(d.mask.mode == MaskMode::ones);
  const auto a = s.parameters(), b = d.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].shape() == b[i].shape());
    CHECK(to_vector(a[i]) == to_vector(b[i]));
  }
  CHECK(to_vector(d.target.projection) == to_vector(s.target.projection));

  const auto path = std::filesystem::temp_directory_path() / "milr_state_test.bin";
  save_milr_state(s, path);
  CHECK(encode_milr_state(load_milr_state(path)) == bytes);
  std::filesystem::remove(path);

  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_milr_state(cut, "cut"), IoError);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_milr_state(longer, "long"), IoError);
  CHECK_THROWS_AS(load_milr_state("/nonexistent/state.bin"), IoError);
}

TEST_CASE("config validation") {
  MilrConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MilrConfig{};
  c.beta_weight = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = MilrConfig{};
  c.episodes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("training keeps the encoder and is reproducible") {
  const Fixture f;
  MilrConfig cfg = f.config;
  cfg.episodes = 20;
  const auto before = encode_encoder(f.frozen);
  const MilrRun run = train_milr(f.ds, f.frozen, cfg, 9);
  CHECK(encode_encoder(f.frozen) == before);
  CHECK(run.state.trained);
  REQUIRE(run.log.size() == 20);
  CHECK(encode_milr_state(train_milr(f.ds, f.frozen, cfg, 9).state) == encode_milr_state(run.state));
  CHECK_THROWS_AS(train_milr(f.ds, Encoder(EncoderConfig{}, 1), cfg, 9), ContractError);

  const auto path = std::filesystem::temp_directory_path() / "milr_log_test.csv";
  write_milr_log(run.log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,task_loss,nce_bound,kl_mean,mean_alpha");
  std::filesystem::remove(path);
}

TEST_CASE("bottleneck pressure closes the mask") {
  const Fixture f;
  MilrConfig cfg = f.config;
  cfg.episodes = 150;
  cfg.beta_weight = 0.0;
  const MilrRun free_run = train_milr(f.ds, f.frozen, cfg, 10);
  cfg.beta_weight = 10.0;
  const MilrRun pressed = train_milr(f.ds, f.frozen, cfg, 10);
  CHECK(pressed.log.back().mean_alpha < free_run.log.back().mean_alpha);
  CHECK(pressed.log.back().kl_mean < free_run.log.back().kl_mean);
}

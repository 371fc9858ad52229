// End-to-end acceptance run. Prints one [PASS]/[FAIL] line per criterion and
// exits non-zero if any fails. Criteria 5 to 12 share one full default
// pipeline run (A) and a second identical run (B).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "milr/app.hpp"
#include "milr/binary_io.hpp"
#include "milr/optim.hpp"
#include "milr/viz.hpp"
#include "../support/grad_cases.hpp"

using namespace milr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::scientific << v;
  return s.str();
}

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << ". " << name << " (" << o.detail
            << "; " << fmt(seconds_since(t0), 1) << "s)" << std::endl;
}

// Shared state of the pipeline run.
struct RunA {
  RunConfig config;
  Dataset train;
  Dataset test;
  Encoder frozen;
  MilrState state;
  FeatureCache test_cache;
  std::vector<std::uint8_t> backbone_before_milr;
  std::vector<std::uint8_t> backbone_after_milr;
  double backbone_seconds = 0.0;
  double trailing_accuracy = 0.0;
};

double protonet_trailing_accuracy(const fs::path& log, std::size_t window) {
  std::ifstream in(log);
  std::string line;
  std::getline(in, line);
  std::vector<double> acc;
  while (std::getline(in, line)) acc.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  const std::size_t n = std::min(window, acc.size());
  double s = 0;
  for (std::size_t i = acc.size() - n; i < acc.size(); ++i) s += acc[i];
  return s / static_cast<double>(n);
}

struct RegionStats {
  double localization = 0.0;  // mean over samples of mass fraction / area fraction
  double redundancy_glyph = 0.0;
  double redundancy_distractor = 0.0;
  double decision_mean = 0.0;
};

RegionStats region_stats(const MilrState& state, const FeatureCache& cache, const Dataset& test,
                         const VizSection& viz, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RegionStats r;
  const std::size_t h = test.height, w = test.width;
  for (const Sample& s : test.samples) {
    const auto partners =
        draw_contrast_partners(cache, s.id, viz.contrast_batches, viz.contrast_size, rng);
    const InfoMap total = total_information_map(state, cache, s.id, partners);
    const InfoMap decision = decision_information_map(state, cache, s.id);
    const InfoMap redundant = redundancy_map(total, decision);
    const Grid d = upsample_bilinear(Grid{decision.height, decision.width, decision.values}, h, w);
    const Grid red = upsample_bilinear(Grid{redundant.height, redundant.width, redundant.values}, h, w);
    double inside = 0, all = 0, rg = 0, rd = 0, ng = 0, nd = 0;
    for (std::size_t p = 0; p < h * w; ++p) {
      all += d.values[p];
      if (s.relevance_mask[p]) {
        inside += d.values[p];
        rg += red.values[p];
        ++ng;
      }
      if (s.distractor_mask[p]) {
        rd += red.values[p];
        ++nd;
      }
    }
    r.localization += (inside / all) / (ng / static_cast<double>(h * w));
    r.redundancy_glyph += rg / ng;
    r.redundancy_distractor += rd / nd;
    r.decision_mean += decision.mean();
  }
  const double n = static_cast<double>(test.samples.size());
  r.localization /= n;
  r.redundancy_glyph /= n;
  r.redundancy_distractor /= n;
  r.decision_mean /= n;
  return r;
}

double mean_decision(const MilrState& state, const FeatureCache& cache, const Dataset& test) {
  double s = 0;
  for (const Sample& x : test.samples) s += decision_information_map(state, cache, x.id).mean();
  return s / static_cast<double>(test.samples.size());
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "milr_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  report(1, "gradient correctness", [] {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1);
    double worst = 0;
    std::string worst_op;
    std::size_t ops = 0;
    for (const auto& c : testing::grad_cases()) {
      ++ops;
      for (int i = 0; i < 20; ++i) {
        const double e = testing::gradcheck(c.fn, c.inputs(rng), rng).max_rel_error;
        if (e > worst) {
          worst = e;
          worst_op = c.name;
        }
      }
    }
    const double t = seconds_since(t0);
    return Outcome{worst < 1e-4 && t < 60.0,
                   std::to_string(ops) + " ops x 20, worst rel error " + sci(worst) + " (" +
                       worst_op + ")"};
  });

  report(2, "InfoNCE structural bounds", [] {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    double max_excess = -1e300, max_const = 0, max_shift = 0;
    for (int t = 0; t < 1000; ++t) {
      const std::size_t n = dim(rng), k = dim(rng);
      const Tensor s = testing::random_tensor({n * k, k}, rng, -20.0, 20.0);
      const double b = infonce_lower_bound(ScoreBlock{s, n, k}).item();
      max_excess = std::max(max_excess, b - std::log(double(n * k)));
      const Tensor shift = testing::random_tensor({k}, rng, -100.0, 100.0);
      max_shift = std::max(max_shift, std::abs(infonce_lower_bound(ScoreBlock{add(s, shift), n, k}).item() - b));
      const Tensor c = Tensor::full({n * k, k}, s.data()[0]);
      max_const = std::max(max_const, std::abs(infonce_lower_bound(ScoreBlock{c, n, k}).item()));
    }
    return Outcome{max_excess <= 1e-9 && max_const <= 1e-12 && max_shift <= 1e-9,
                   "max bound - ln(NK) " + fmt(max_excess, 4) + ", |constant| " + sci(max_const) +
                       ", shift drift " + sci(max_shift)};
  });

  report(3, "InfoNCE calibration at rho = 0.5", [] {
    const auto t0 = Clock::now();
    CalibrationConfig cfg;
    const double b = calibrate_infonce(0.5, cfg);
    const double mi = gaussian_pair_mi(0.5);
    const double t = seconds_since(t0);
    return Outcome{b >= mi - 0.05 && b <= mi + 0.01 && t < 120.0,
                   "bound " + fmt(b) + " vs MI " + fmt(mi, 6) + ", window [0.094, 0.154]"};
  });

  report(4, "Gaussian KL against quadrature", [] {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> mu(-3.0, 3.0), lv(-2.5, 2.5);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      const double m = mu(rng), v = std::exp(lv(rng));
      worst = std::max(worst, std::abs(gaussian_kl(m, v) - testing::gaussian_kl_quadrature(m, v)));
    }
    const double zero = gaussian_kl(0.0, 1.0);
    return Outcome{worst < 1e-6 && zero == 0.0,
                   "worst |closed form - quadrature| " + sci(worst) +
                       ", KL(N(0,1)||N(0,1)) = " + sci(zero)};
  });

  RunA a;
  a.config.output_dir = root.string();
  a.config.run_id = "A";

  report(5, "protonet on the default synthetic dataset", [&] {
    run_command("synth-data", a.config);
    const auto t0 = Clock::now();
    run_command("train-backbone", a.config);
    a.backbone_seconds = seconds_since(t0);
    a.trailing_accuracy =
        protonet_trailing_accuracy(a.config.run_dir() / "protonet_log.csv", 100);
    return Outcome{a.trailing_accuracy >= 0.9 && a.backbone_seconds < 300.0,
                   "trailing-100 accuracy " + fmt(a.trailing_accuracy) + " over " +
                       std::to_string(a.config.protonet.episodes) + " episodes"};
  });

  report(6, "freeze contract", [&] {
    const fs::path backbone = a.config.run_dir() / "backbone.bin";
    a.backbone_before_milr = io::read_file(backbone);
    run_command("train-milr", a.config);
    a.backbone_after_milr = io::read_file(backbone);
    run_command("explain", a.config);
    const bool same = a.backbone_before_milr == a.backbone_after_milr &&
                      io::read_file(backbone) == a.backbone_before_milr;
    return Outcome{same, "backbone fnv1a " + std::to_string(io::fnv1a(a.backbone_before_milr)) +
                             (same ? " unchanged" : " changed")};
  });

  // Load what run A produced for the remaining criteria.
  a.train = load_dataset(a.config.run_dir() / "dataset.bin");
  a.test = load_dataset(a.config.run_dir() / "dataset_test.bin");
  a.frozen = freeze(load_encoder(a.config.run_dir() / "backbone.bin"));
  a.state = load_milr_state(a.config.run_dir() / "milr_state.bin");
  a.test_cache = stage1_collect(a.frozen, a.test);

  report(7, "mask saturation", [&] {
    const FeatureCache cache = stage1_collect(a.frozen, a.train);
    std::mt19937_64 rng(7);
    MilrState ones = a.state;
    ones.mask.mode = MaskMode::ones;
    ones.beta_weight = 0.0;
    bool bitwise = true, exact = true;
    for (int e = 0; e < 20; ++e) {
      const Episode ep = sample_episode(a.train, 5, 1, 5, rng);
      std::vector<std::size_t> ids;
      for (std::size_t i : ep.all_samples()) ids.push_back(a.train.samples[i].id);
      const Tensor x = cache.locals(ids);
      bitwise &= testing::to_vector(apply_mask(x, ones.mask.forward(x))) == testing::to_vector(x);
      const double task = milr_objective(ep, a.train, cache, a.frozen, ones).task_loss.item();
      exact &= task == episode_loss(ep, a.train, a.frozen).loss.item();
    }

    // alpha pinned to 0: retrain a critic between x' and z from scratch.
    MilrState zeros = a.state;
    zeros.mask.mode = MaskMode::zeros;
    std::mt19937_64 crng(77);
    Critic critic = make_critic(a.frozen.config().tap_channels(), a.frozen.config().repr_dim,
                                a.config.milr.hidden, a.config.milr.score_dim, crng);
    Adam opt(critic.parameters(), AdamConfig{a.config.milr.lr});
    const auto all_ids = cache.ids();
    std::uniform_int_distribution<std::size_t> pick(0, all_ids.size() - 1);
    auto batch = [&](std::mt19937_64& r) {
      std::vector<std::size_t> ids;
      while (ids.size() < 10) {
        const std::size_t id = all_ids[pick(r)];
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
      }
      return ids;
    };
    for (int step = 0; step < 300; ++step) {
      const auto ids = batch(crng);
      const Tensor x = cache.locals(ids);
      Tape tape;
      TapeScope scope(tape);
      opt.zero_grad();
      const Tensor masked = apply_mask(x, zeros.mask.forward(x));
      tape.backward(neg(infonce_lower_bound(score_matrix(critic, masked, cache.representations(ids)))));
      opt.step();
    }
    double est = 0;
    for (int b = 0; b < 20; ++b) {
      const auto ids = batch(crng);
      const Tensor x = cache.locals(ids);
      const Tensor masked = apply_mask(x, zeros.mask.forward(x));
      est += infonce_lower_bound(score_matrix(critic, masked, cache.representations(ids))).item();
    }
    est /= 20;
    return Outcome{bitwise && exact && est <= 0.05,
                   std::string("alpha=1: x' ") + (bitwise ? "bitwise equal" : "differs") +
                       ", task loss " + (exact ? "exact" : "differs") +
                       "; alpha=0: retrained InfoNCE " + sci(est) + " nats"};
  });

  report(8, "aggregation identities", [&] {
    std::mt19937_64 rng(8);
    double worst_total = 0, worst_decision = 0;
    const auto ids = a.test_cache.ids();
    for (std::size_t i = 0; i < 10; ++i) {
      const std::size_t id = ids[i * ids.size() / 10];
      const auto partners = draw_contrast_partners(a.test_cache, id, 1, a.config.viz.contrast_size, rng);
      std::vector<std::size_t> b = {id};
      b.insert(b.end(), partners[0].begin(), partners[0].end());
      const auto maps = total_information_maps(a.state, a.test_cache, b);
      double acc = 0;
      std::size_t count = 0;
      for (const InfoMap& m : maps) {
        for (double v : m.values) acc += v;
        count += m.values.size();
      }
      const double bound = infonce_lower_bound(score_matrix(
          a.state.critic, a.test_cache.locals(b), a.test_cache.representations(b))).item();
      worst_total = std::max(worst_total, std::abs(acc / count - bound));

      const std::size_t one[] = {id};
      const Tensor x = a.test_cache.locals(one);
      const double vib = vib_upper_bound(a.state.bottleneck, apply_mask(x, a.state.mask.forward(x)))
                             .bound.item();
      worst_decision = std::max(
          worst_decision, std::abs(decision_information_map(a.state, a.test_cache, id).mean() - vib));
    }
    return Outcome{worst_total <= 1e-9 && worst_decision <= 1e-9,
                   "total vs InfoNCE " + sci(worst_total) + ", decision vs VIB " +
                       sci(worst_decision)};
  });

  RegionStats stats;
  bool have_stats = false;
  auto ensure_stats = [&] {
    if (!have_stats) {
      stats = region_stats(a.state, a.test_cache, a.test, a.config.viz, 9);
      have_stats = true;
    }
  };

  report(9, "localization of decision information", [&] {
    ensure_stats();
    return Outcome{stats.localization >= 2.0,
                   "mass/area ratio " + fmt(stats.localization, 3) + " over " +
                       std::to_string(a.test.samples.size()) + " test samples"};
  });

  report(10, "redundancy direction", [&] {
    ensure_stats();
    return Outcome{stats.redundancy_distractor > stats.redundancy_glyph,
                   "mean redundancy distractor " + fmt(stats.redundancy_distractor) + " vs glyph " +
                       fmt(stats.redundancy_glyph)};
  });

  report(11, "beta monotonicity", [&] {
    MilrConfig cfg = a.config.milr;
    const std::uint64_t seed = stage_seed(a.config.seed, "milr");
    cfg.beta_weight = 1.0;
    const MilrRun high = train_milr(a.train, a.frozen, cfg, seed);
    cfg.beta_weight = 0.001;
    const MilrRun low = train_milr(a.train, a.frozen, cfg, seed);
    const double dh = mean_decision(high.state, a.test_cache, a.test);
    const double dl = mean_decision(low.state, a.test_cache, a.test);
    return Outcome{dh < dl, "mean decision map: beta 1.0 -> " + fmt(dh) + ", beta 0.001 -> " + fmt(dl)};
  });

  report(12, "determinism across full pipeline runs", [&] {
    RunConfig b = a.config;
    b.run_id = "B";
    run_command("pipeline", b);
    const auto ma = io::read_file(a.config.run_dir() / "maps.csv");
    const auto mb = io::read_file(b.run_dir() / "maps.csv");
    return Outcome{ma == mb, "maps.csv " + std::to_string(ma.size()) + " bytes, " +
                                 (ma == mb ? "identical" : "different")};
  });

  report(13, "rendering exactness", [] {
    auto colour = [](double v) {
      const RgbImage c = colorize(Grid{1, 1, {v}});
      return std::array<int, 3>{c.at(0, 0, 0), c.at(0, 0, 1), c.at(0, 0, 2)};
    };
    bool ok = colour(0.0) == std::array<int, 3>{0, 0, 255} &&
              colour(0.5) == std::array<int, 3>{0, 255, 0} &&
              colour(1.0) == std::array<int, 3>{255, 0, 0} &&
              colour(0.25) == std::array<int, 3>{0, 128, 128};
    std::mt19937_64 rng(13);
    std::uniform_int_distribution<int> byte(0, 255);
    std::uniform_real_distribution<double> val(-3, 3), scale(0.01, 100), shift(-50, 50);
    std::size_t blends = 0, affine = 0;
    for (int t = 0; t < 100; ++t) {
      RgbImage x{16, 16, std::vector<std::uint8_t>(768)}, y = x;
      for (auto& p : x.pixels) p = static_cast<std::uint8_t>(byte(rng));
      for (auto& p : y.pixels) p = static_cast<std::uint8_t>(byte(rng));
      blends += blend(x, y, 0.0).pixels == x.pixels && blend(x, y, 1.0).pixels == y.pixels;

      InfoMap m{8, 8, std::vector<double>(64), MapKind::total, 0};
      for (double& v : m.values) v = val(rng);
      InfoMap r = m;
      const double s = scale(rng), c = shift(rng);
      for (double& v : r.values) v = s * v + c;
      affine += render_heat(m, 32, 32).pixels == render_heat(r, 32, 32).pixels;
    }
    ok = ok && blends == 100 && affine == 100;
    return Outcome{ok, "control points, " + std::to_string(blends) + "/100 blend identities, " +
                           std::to_string(affine) + "/100 affine-invariant heat maps"};
  });

  fs::remove_all(root);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}

#include "milr/estimators.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "milr/errors.hpp"
#include "milr/optim.hpp"

namespace milr {

std::vector<Tensor> Critic::parameters() const {
  std::vector<Tensor> p;
  append_parameters(local_projector, p);
  append_parameters(repr_projector, p);
  return p;
}

Critic make_critic(std::size_t local_dim, std::size_t repr_dim,
                   std::size_t hidden, std::size_t score_dim,
                   std::mt19937_64& rng) {
  if (local_dim == 0 || repr_dim == 0 || hidden == 0 || score_dim == 0) {
    throw ConfigError("make_critic: dimensions must be positive");
  }
  return Critic{make_mlp2(local_dim, hidden, score_dim, rng),
                make_mlp2(repr_dim, hidden, score_dim, rng)};
}

void zero_critic(Critic& critic) {
  for (Tensor& t : critic.parameters()) {
    auto v = t.mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
  }
}

ScoreBlock score_matrix(const Critic& critic, const Tensor& locals,
                        const Tensor& reprs) {
  if (locals.dim() != 4 || reprs.dim() != 2) {
    throw DimensionError("score_matrix expects locals [K,C,h,w] and reprs [K,d]");
  }
  const std::size_t k = locals.size(0);
  if (reprs.size(0) != k) {
    throw DimensionError("score_matrix: " + std::to_string(k) +
                         " local grids but " + std::to_string(reprs.size(0)) +
                         " representations");
  }
  const std::size_t c = locals.size(1);
  const std::size_t n = locals.size(2) * locals.size(3);
  try {
    const Tensor flat = reshape(permute(locals, {0, 2, 3, 1}), {n * k, c});
    const Tensor lp = critic.local_projector.forward(flat);
    const Tensor rp = critic.repr_projector.forward(reprs);
    return ScoreBlock{matmul(lp, transpose(rp)), n, k};
  } catch (const NumericError& e) {
    throw EstimationError(std::string("score_matrix: ") + e.what());
  }
}

Tensor infonce_terms(const ScoreBlock& block) {
  const std::size_t n = block.locals_per_sample;
  const std::size_t k = block.samples;
  if (n == 0 || k == 0 || block.scores.dim() != 2 ||
      block.scores.size(0) != n * k || block.scores.size(1) != k) {
    throw DimensionError("infonce: score block must be [N*K, K]");
  }
  const std::size_t rows = n * k;
  std::vector<double> onehot(rows * k, 0.0);
  std::vector<std::size_t> positive(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    positive[r] = block.positive_of(r);
    onehot[r * k + positive[r]] = 1.0;
  }
  try {
    const Tensor column_lse = reshape(logsumexp(block.scores, 0), {k, 1});
    const Tensor pos_score = sum(mul(block.scores, Tensor({rows, k}, std::move(onehot))), 1);
    const Tensor pos_lse = reshape(index_select(column_lse, positive), {rows});
    return add_scalar(pos_score - pos_lse, std::log(static_cast<double>(rows)));
  } catch (const NumericError& e) {
    throw EstimationError(std::string("infonce: ") + e.what());
  }
}

Tensor infonce_lower_bound(const ScoreBlock& block) {
  return mean(infonce_terms(block));
}

// ---------------------------------------------------------------------------

std::vector<Tensor> BottleneckHead::parameters() const {
  return {hidden_weight, hidden_bias, mean_weight, mean_bias, logvar_weight,
          logvar_bias};
}

BottleneckHead BottleneckHead::detached() const {
  return {hidden_weight.detach(), hidden_bias.detach(), mean_weight.detach(),
          mean_bias.detach(),    logvar_weight.detach(), logvar_bias.detach()};
}

BottleneckHead make_bottleneck(std::size_t local_dim, std::size_t hidden,
                               std::size_t bottleneck_dim, std::mt19937_64& rng) {
  if (local_dim == 0 || hidden == 0 || bottleneck_dim == 0) {
    throw ConfigError("make_bottleneck: dimensions must be positive");
  }
  BottleneckHead h;
  h.hidden_weight = init_uniform({hidden, local_dim, 1, 1}, local_dim, 6.0, rng);
  h.hidden_bias = Tensor::zeros({hidden}, true);
  h.mean_weight = init_uniform({bottleneck_dim, hidden, 1, 1}, hidden, 1.0, rng);
  h.mean_bias = Tensor::zeros({bottleneck_dim}, true);
  h.logvar_weight = init_uniform({bottleneck_dim, hidden, 1, 1}, hidden, 0.1, rng);
  h.logvar_bias = Tensor::zeros({bottleneck_dim}, true);
  return h;
}

GaussianGrid bottleneck_forward(const BottleneckHead& head, const Tensor& locals) {
  if (locals.dim() != 4) throw DimensionError("bottleneck expects locals [K,C,h,w]");
  const Tensor h = relu(conv2d(locals, head.hidden_weight, head.hidden_bias));
  GaussianGrid g;
  g.mean = conv2d(h, head.mean_weight, head.mean_bias);
  g.logvar = clamp(conv2d(h, head.logvar_weight, head.logvar_bias),
                   kLogvarMin, kLogvarMax);
  return g;
}

Tensor gaussian_kl_grid(const GaussianGrid& g) {
  const Tensor per_dim =
      add_scalar(square(g.mean) + exp(g.logvar) - g.logvar, -1.0);
  return scale(sum(per_dim, 1), 0.5);
}

VibBound vib_upper_bound(const BottleneckHead& head, const Tensor& locals) {
  VibBound v;
  v.grid = gaussian_kl_grid(bottleneck_forward(head, locals));
  v.bound = mean(v.grid);
  return v;
}

Tensor gaussian_nll(const GaussianGrid& g, const Tensor& target) {
  const std::size_t k = g.mean.size(0);
  const std::size_t d = g.mean.size(1);
  if (target.dim() != 2 || target.size(0) != k || target.size(1) != d) {
    throw DimensionError("gaussian_nll: target must be [" + std::to_string(k) +
                         "," + std::to_string(d) + "]");
  }
  const Tensor t = reshape(target, {k, d, 1, 1});
  const Tensor resid = square(t - g.mean);
  const Tensor per_dim = g.logvar + resid * exp(neg(g.logvar));
  const double log_2pi = std::log(2.0 * 3.14159265358979323846);
  return mean(scale(add_scalar(sum(per_dim, 1), static_cast<double>(d) * log_2pi), 0.5));
}

double gaussian_kl(double mu, double var) {
  return 0.5 * (mu * mu + var - std::log(var) - 1.0);
}

// ---------------------------------------------------------------------------

double gaussian_pair_mi(double rho) {
  if (!(std::abs(rho) < 1.0)) {
    throw ConfigError("gaussian pair correlation must satisfy |rho| < 1");
  }
  return -0.5 * std::log(1.0 - rho * rho);
}

namespace {

void draw_pairs(double rho, std::size_t n, std::mt19937_64& rng,
                std::vector<double>& x, std::vector<double>& y) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const double s = std::sqrt(1.0 - rho * rho);
  x.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = normal(rng);
    y[i] = rho * x[i] + s * normal(rng);
  }
}

void check_calibration(const CalibrationConfig& c) {
  if (c.steps == 0 || c.batch < 2 || c.vib_batch == 0 || c.eval_batches == 0) {
    throw ConfigError("calibration: steps, batch >= 2 and eval_batches required");
  }
}

}  // namespace

GaussianPairs gaussian_pair_oracle(double rho, std::size_t n_samples,
                                   std::uint64_t seed) {
  GaussianPairs p;
  p.rho = rho;
  p.analytic_mi = gaussian_pair_mi(rho);
  std::mt19937_64 rng(seed);
  draw_pairs(rho, n_samples, rng, p.x, p.y);
  return p;
}

double calibrate_infonce(double rho, const CalibrationConfig& config) {
  gaussian_pair_mi(rho);
  check_calibration(config);
  std::mt19937_64 rng(config.seed);
  Critic critic = make_critic(1, 1, config.hidden, config.score_dim, rng);
  Adam opt(critic.parameters(), AdamConfig{config.lr});
  const std::size_t k = config.batch;
  std::vector<double> x, y;
  for (std::size_t step = 0; step < config.steps; ++step) {
    draw_pairs(rho, k, rng, x, y);
    Tape tape;
    TapeScope scope(tape);
    opt.zero_grad();
    const ScoreBlock block =
        score_matrix(critic, Tensor({k, 1, 1, 1}, x), Tensor({k, 1}, y));
    tape.backward(neg(infonce_lower_bound(block)));
    opt.step();
  }
  double total = 0.0;
  for (std::size_t b = 0; b < config.eval_batches; ++b) {
    draw_pairs(rho, k, rng, x, y);
    total += infonce_lower_bound(
                 score_matrix(critic, Tensor({k, 1, 1, 1}, x), Tensor({k, 1}, y)))
                 .item();
  }
  return total / static_cast<double>(config.eval_batches);
}

double calibrate_vib(double rho, const CalibrationConfig& config) {
  gaussian_pair_mi(rho);
  check_calibration(config);
  std::mt19937_64 rng(config.seed + 1);
  BottleneckHead head = make_bottleneck(1, config.hidden, 1, rng);
  std::vector<Tensor> params = head.parameters();
  AdamState state;
  AdamConfig adam{config.lr};
  const std::size_t k = config.vib_batch;
  std::vector<double> x, y;
  for (std::size_t step = 0; step < config.steps; ++step) {
    draw_pairs(rho, k, rng, x, y);
    Tape tape;
    TapeScope scope(tape);
    for (Tensor& p : params) p.zero_grad();
    const GaussianGrid g = bottleneck_forward(head, Tensor({k, 1, 1, 1}, x));
    tape.backward(gaussian_nll(g, Tensor({k, 1}, y)));
    // The KL is sensitive to the last iterate's noise, so the step size
    // decays linearly to zero.
    adam.lr = config.lr * static_cast<double>(config.steps - step) /
              static_cast<double>(config.steps);
    adam_step(params, state, adam);
  }
  double total = 0.0;
  for (std::size_t b = 0; b < config.eval_batches; ++b) {
    draw_pairs(rho, k, rng, x, y);
    total += vib_upper_bound(head, Tensor({k, 1, 1, 1}, x)).bound.item();
  }
  return total / static_cast<double>(config.eval_batches);
}

CalibrationResult calibrate(double rho, const CalibrationConfig& config) {
  CalibrationResult r;
  r.rho = rho;
  r.analytic_mi = gaussian_pair_mi(rho);
  r.nce_bound = calibrate_infonce(rho, config);
  r.vib_bound = calibrate_vib(rho, config);
  r.steps = config.steps;
  return r;
}

void write_calibration_csv(const std::vector<CalibrationResult>& rows,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "rho,analytic_mi,nce_bound,vib_bound,steps\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.rho << ',' << r.analytic_mi << ',' << r.nce_bound << ','
        << r.vib_bound << ',' << r.steps << '\n';
  }
}

}  // namespace milr

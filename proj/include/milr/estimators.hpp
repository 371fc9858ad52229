#pragma once

// Information bounds between local features and a global representation.
//
// Lower bound (InfoNCE): with K samples of N local features each, every
// local feature i of sample j is scored against its own sample's
// representation z_j, contrasted with the scores of all N*K local features
// against that same z_j:
//
//   term(i) = f(x_i, z_j) - logsumexp_{m,n} f(x_m^n, z_j) + ln(N*K)
//
// and the bound is the mean of term(i) over all N*K local features. It is at
// most ln(N*K).
//
// Upper bound (variational): a Gaussian head p(z|x_i) = N(mu_i, diag s_i^2)
// per location, compared with q(z) = N(0, I):
//
//   KL_i = 1/2 * sum_d (mu^2 + s^2 - log s^2 - 1)

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "milr/nn.hpp"

namespace milr {

/// Separable critic: score(l, z) = <local_projector(l), repr_projector(z)>.
struct Critic {
  Mlp2 local_projector;
  Mlp2 repr_projector;

  std::vector<Tensor> parameters() const;
};

Critic make_critic(std::size_t local_dim, std::size_t repr_dim,
                   std::size_t hidden, std::size_t score_dim,
                   std::mt19937_64& rng);

/// Sets every critic weight and bias to zero.
void zero_critic(Critic& critic);

struct ScoreBlock {
  Tensor scores;  // [N*K, K]; row k*N + n is local n of sample k
  std::size_t locals_per_sample = 0;  // N
  std::size_t samples = 0;            // K

  std::size_t positive_of(std::size_t row) const { return row / locals_per_sample; }
};

/// locals [K,C,h,w] -> flattened to N*K rows of C features (sample-major,
/// then row-major over the grid), reprs [K,d].
ScoreBlock score_matrix(const Critic& critic, const Tensor& locals,
                        const Tensor& reprs);

/// Per-local log-ratio terms [N*K]; their mean is the bound.
Tensor infonce_terms(const ScoreBlock& block);

/// Scalar InfoNCE lower bound in nats.
Tensor infonce_lower_bound(const ScoreBlock& block);

/// Gaussian p(z | x_i) from a per-location two-layer perceptron, written as
/// 1x1 convolutions over the local grid: h = relu(conv(x)), then mean and
/// log-variance heads on h.
struct BottleneckHead {
  Tensor hidden_weight;  // [H, C, 1, 1]
  Tensor hidden_bias;    // [H]
  Tensor mean_weight;    // [d_b, H, 1, 1]
  Tensor mean_bias;      // [d_b]
  Tensor logvar_weight;  // [d_b, H, 1, 1]
  Tensor logvar_bias;    // [d_b]

  std::vector<Tensor> parameters() const;
  /// Copy whose tensors do not require gradients.
  BottleneckHead detached() const;
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

BottleneckHead make_bottleneck(std::size_t local_dim, std::size_t hidden,
                               std::size_t bottleneck_dim, std::mt19937_64& rng);

struct GaussianGrid {
  Tensor mean;    // [K, d_b, h, w]
  Tensor logvar;  // [K, d_b, h, w], clamped to [kLogvarMin, kLogvarMax]
};

GaussianGrid bottleneck_forward(const BottleneckHead& head, const Tensor& locals);

/// Closed-form KL(N(mean, exp(logvar)) || N(0, I)) per location: [K, h, w].
Tensor gaussian_kl_grid(const GaussianGrid& g);

struct VibBound {
  Tensor bound;  // scalar: mean of grid
  Tensor grid;   // [K, h, w]
};

VibBound vib_upper_bound(const BottleneckHead& head, const Tensor& locals);

/// Gaussian negative log-likelihood of `target` [K, d_b] under the head's
/// prediction at every location of its sample, averaged over locations and
/// summed over dimensions. This is the fit that makes the head approximate
/// p(z | x_i).
Tensor gaussian_nll(const GaussianGrid& g, const Tensor& target);

/// Scalar KL(N(mu, var) || N(0,1)).
double gaussian_kl(double mu, double var);

// ---------------------------------------------------------------------------
// Calibration against a bivariate Gaussian with known mutual information.

struct GaussianPairs {
  std::vector<double> x;
  std::vector<double> y;
  double rho = 0.0;
  double analytic_mi = 0.0;  // -1/2 ln(1 - rho^2)
};

/// Throws ConfigError when |rho| >= 1.
GaussianPairs gaussian_pair_oracle(double rho, std::size_t n_samples,
                                   std::uint64_t seed);

double gaussian_pair_mi(double rho);

struct CalibrationConfig {
  std::size_t steps = 5000;
  std::size_t batch = 128;
  double lr = 1e-3;
  std::size_t hidden = 128;
  std::size_t score_dim = 64;
  std::size_t eval_batches = 100;
  std::size_t vib_batch = 256;  // likelihood fit batch for the bottleneck head
  std::uint64_t seed = 0;
};

struct CalibrationResult {
  double rho = 0.0;
  double analytic_mi = 0.0;
  double nce_bound = 0.0;
  double vib_bound = 0.0;
  std::size_t steps = 0;
};

/// Trains a critic with local = x and representation = y (N = 1, K = batch)
/// and reports the InfoNCE bound averaged over fresh evaluation batches.
double calibrate_infonce(double rho, const CalibrationConfig& config);

/// Fits a bottleneck head p(y | x) by Gaussian likelihood and reports the
/// variational KL bound averaged over fresh evaluation batches.
double calibrate_vib(double rho, const CalibrationConfig& config);

CalibrationResult calibrate(double rho, const CalibrationConfig& config);

/// CSV with header "rho,analytic_mi,nce_bound,vib_bound,steps".
void write_calibration_csv(const std::vector<CalibrationResult>& rows,
                           const std::filesystem::path& path);

}  // namespace milr

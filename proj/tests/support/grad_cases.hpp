#pragma once

// One entry per differentiable operation: a random-input generator and the
// function whose gradient is checked. Kinked ops get inputs kept clear of
// their kinks so central differences never straddle one.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "milr/estimators.hpp"
#include "milr/protonet.hpp"
#include "oracles.hpp"

namespace milr::testing {

struct GradCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> fn;
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor positive(const Shape& s, std::mt19937_64& rng) {
  return random_tensor(s, rng, 0.5, 2.0);
}

inline Tensor nonzero(const Shape& s, std::mt19937_64& rng) {
  Tensor t = positive(s, rng);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.mutable_data()) {
    if (flip(rng)) v = -v;
  }
  return t;
}

inline std::vector<GradCase> grad_cases() {
  using In = std::vector<Tensor>;
  auto unary = [](std::string name, std::function<Tensor(const Tensor&)> op,
                  std::function<Tensor(const Shape&, std::mt19937_64&)> gen) {
    return GradCase{std::move(name),
                    [gen](std::mt19937_64& rng) {
                      return In{gen({pick(rng, 1, 4), pick(rng, 1, 5)}, rng)};
                    },
                    [op](const In& in) { return op(in[0]); }};
  };
  auto plain = [](const Shape& s, std::mt19937_64& rng) { return random_tensor(s, rng); };
  auto binary = [](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                   bool nonzero_rhs) {
    return GradCase{std::move(name),
                    [nonzero_rhs](std::mt19937_64& rng) {
                      const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
                      // Alternate full shapes and broadcast shapes.
                      Shape rhs = {r, c};
                      switch (pick(rng, 0, 3)) {
                        case 1: rhs = {c}; break;
                        case 2: rhs = {r, 1}; break;
                        case 3: rhs = {1}; break;
                        default: break;
                      }
                      return In{random_tensor({r, c}, rng),
                                nonzero_rhs ? nonzero(rhs, rng) : random_tensor(rhs, rng)};
                    },
                    [op](const In& in) { return op(in[0], in[1]); }};
  };

  std::vector<GradCase> cases;
  cases.push_back(binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, false));
  cases.push_back(binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, false));
  cases.push_back(binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, false));
  cases.push_back(binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, true));
  cases.push_back(unary("neg", [](const Tensor& x) { return neg(x); }, plain));
  cases.push_back(unary("scale", [](const Tensor& x) { return scale(x, -1.7); }, plain));
  cases.push_back(unary("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, plain));
  cases.push_back(unary("relu", [](const Tensor& x) { return relu(x); },
                        [](const Shape& s, std::mt19937_64& rng) { return random_away_from(s, rng, 1e-2); }));
  cases.push_back(unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, plain));
  cases.push_back(unary("tanh", [](const Tensor& x) { return milr::tanh(x); }, plain));
  cases.push_back(unary("exp", [](const Tensor& x) { return milr::exp(x); }, plain));
  cases.push_back(unary("log", [](const Tensor& x) { return milr::log(x); }, positive));
  cases.push_back(unary("square", [](const Tensor& x) { return square(x); }, plain));
  cases.push_back(unary("clamp", [](const Tensor& x) { return clamp(add_scalar(x, 0.5), -1.0, 1.0); },
                        [](const Shape& s, std::mt19937_64& rng) {
                          // keep x + 0.5 clear of -1 and 1
                          Tensor t = random_tensor(s, rng);
                          for (double& v : t.mutable_data()) {
                            const double y = v + 0.5;
                            if (std::abs(y - 1.0) < 1e-2 || std::abs(y + 1.0) < 1e-2) v += 0.05;
                          }
                          return t;
                        }));

  cases.push_back(unary("sum", [](const Tensor& x) { return sum(x); }, plain));
  cases.push_back(unary("mean", [](const Tensor& x) { return mean(x); }, plain));
  cases.push_back(unary("sum_axis", [](const Tensor& x) { return sum(x, 0, true); }, plain));
  cases.push_back(unary("mean_axis", [](const Tensor& x) { return mean(x, -1); }, plain));
  cases.push_back(unary("logsumexp", [](const Tensor& x) { return logsumexp(x, 1); }, plain));
  cases.push_back(unary("logsumexp_axis0", [](const Tensor& x) { return logsumexp(x, 0, true); }, plain));
  cases.push_back(unary("softmax", [](const Tensor& x) { return softmax(x, -1); }, plain));
  cases.push_back(unary("log_softmax", [](const Tensor& x) { return log_softmax(x, 0); }, plain));

  cases.push_back(GradCase{"reshape",
                           [](std::mt19937_64& rng) { return In{random_tensor({2, pick(rng, 1, 3), 3}, rng)}; },
                           [](const In& in) { return reshape(in[0], {in[0].numel() / 3, 3}); }});
  cases.push_back(GradCase{"broadcast_to",
                           [](std::mt19937_64& rng) { return In{random_tensor({pick(rng, 1, 3), 1}, rng)}; },
                           [](const In& in) { return broadcast_to(in[0], {2, in[0].size(0), 4}); }});
  cases.push_back(GradCase{"permute",
                           [](std::mt19937_64& rng) {
                             return In{random_tensor({pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)}, rng)};
                           },
                           [](const In& in) { return permute(in[0], {2, 0, 1}); }});
  cases.push_back(unary("transpose", [](const Tensor& x) { return transpose(x); }, plain));
  cases.push_back(GradCase{"index_select",
                           [](std::mt19937_64& rng) { return In{random_tensor({4, pick(rng, 1, 3)}, rng)}; },
                           [](const In& in) { return index_select(in[0], {3, 0, 3, 1}); }});
  cases.push_back(GradCase{"concat",
                           [](std::mt19937_64& rng) {
                             const std::size_t c = pick(rng, 1, 4);
                             return In{random_tensor({pick(rng, 1, 3), c}, rng),
                                       random_tensor({pick(rng, 1, 3), c}, rng)};
                           },
                           [](const In& in) { return concat({in[0], in[1]}); }});

  cases.push_back(GradCase{"matmul",
                           [](std::mt19937_64& rng) {
                             const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 6), n = pick(rng, 1, 5);
                             return In{random_tensor({m, k}, rng), random_tensor({k, n}, rng)};
                           },
                           [](const In& in) { return matmul(in[0], in[1]); }});
  cases.push_back(GradCase{"conv2d",
                           [](std::mt19937_64& rng) {
                             const std::size_t c = pick(rng, 1, 3), o = pick(rng, 1, 3), s = pick(rng, 4, 6);
                             return In{random_tensor({pick(rng, 1, 2), c, s, s}, rng),
                                       random_tensor({o, c, 3, 3}, rng), random_tensor({o}, rng)};
                           },
                           [](const In& in) { return conv2d(in[0], in[1], in[2], {1, 1}); }});
  cases.push_back(GradCase{"conv2d_strided",
                           [](std::mt19937_64& rng) {
                             const std::size_t c = pick(rng, 1, 2), o = pick(rng, 1, 3), s = pick(rng, 5, 7);
                             return In{random_tensor({1, c, s, s}, rng), random_tensor({o, c, 3, 3}, rng),
                                       random_tensor({o}, rng)};
                           },
                           [](const In& in) { return conv2d(in[0], in[1], in[2], {2, 0}); }});
  cases.push_back(GradCase{"avgpool2d",
                           [](std::mt19937_64& rng) {
                             const std::size_t s = 2 * pick(rng, 1, 3);
                             return In{random_tensor({pick(rng, 1, 2), pick(rng, 1, 3), s, s}, rng)};
                           },
                           [](const In& in) { return avgpool2d(in[0], 2); }});
  cases.push_back(GradCase{"spatial_mean",
                           [](std::mt19937_64& rng) {
                             return In{random_tensor({pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4)}, rng)};
                           },
                           [](const In& in) { return spatial_mean(in[0]); }});

  cases.push_back(GradCase{"infonce_terms",
                           [](std::mt19937_64& rng) {
                             const std::size_t n = pick(rng, 1, 4), k = pick(rng, 1, 4);
                             return In{random_tensor({n * k, k}, rng)};
                           },
                           [](const In& in) {
                             const std::size_t k = in[0].size(1);
                             return infonce_terms(ScoreBlock{in[0], in[0].size(0) / k, k});
                           }});
  cases.push_back(GradCase{"gaussian_kl_grid",
                           [](std::mt19937_64& rng) {
                             const Shape s = {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
                             return In{random_tensor(s, rng), random_tensor(s, rng)};
                           },
                           [](const In& in) { return gaussian_kl_grid(GaussianGrid{in[0], in[1]}); }});
  cases.push_back(GradCase{"gaussian_nll",
                           [](std::mt19937_64& rng) {
                             const std::size_t k = pick(rng, 1, 2), d = pick(rng, 1, 3);
                             const Shape s = {k, d, pick(rng, 1, 3), pick(rng, 1, 3)};
                             return In{random_tensor(s, rng), random_tensor(s, rng), random_tensor({k, d}, rng)};
                           },
                           [](const In& in) { return gaussian_nll(GaussianGrid{in[0], in[1]}, in[2]); }});
  cases.push_back(GradCase{"prototype_logits",
                           [](std::mt19937_64& rng) {
                             const std::size_t d = pick(rng, 1, 4);
                             return In{random_tensor({pick(rng, 1, 4), d}, rng), random_tensor({3, d}, rng)};
                           },
                           [](const In& in) {
                             return prototype_logits(in[0], PrototypeSet{in[1], {0, 1, 2}});
                           }});
  cases.push_back(GradCase{"two_layer_network",
                           [](std::mt19937_64& rng) {
                             return In{random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                                       random_tensor({5}, rng), random_tensor({5, 2}, rng)};
                           },
                           [](const In& in) {
                             // tanh keeps the hidden layer smooth
                             return log_softmax(matmul(milr::tanh(add(matmul(in[0], in[1]), in[2])), in[3]), 1);
                           }});
  return cases;
}

}  // namespace milr::testing

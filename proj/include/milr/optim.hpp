#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "milr/tensor.hpp"

namespace milr {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;  // ConfigError on out-of-range values
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update of `params` from their accumulated grads.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws ContractError for frozen parameters (requires_grad == false) or a
/// state whose moment arrays do not match the parameters.
void adam_step(std::span<Tensor> params, AdamState& state,
               const AdamConfig& config);

/// Owns the parameter list and Adam state for one training run.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config);

  void zero_grad();
  void step();
  std::int64_t steps() const { return state_.step; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  AdamState state_;
};

}  // namespace milr

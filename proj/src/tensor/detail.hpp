#pragma once

#include <initializer_list>
#include <string_view>

#include "milr/tensor.hpp"

namespace milr::detail {

/// Throws NumericError if any value is NaN or infinite.
void check_finite(std::span<const double> values, std::string_view op);

/// Wraps freshly computed values into a Tensor and records the backward rule
/// when a tape is active and any input requires gradients.
Tensor finish(std::string_view op, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs,
              Tape::BackwardFn backward);

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op);

inline bool wants_grad(const Tensor& t) {
  return t.defined() && t.impl()->requires_grad;
}

}  // namespace milr::detail

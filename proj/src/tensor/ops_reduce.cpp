#include <algorithm>
#include <cmath>
#include <limits>

#include "detail.hpp"
#include "milr/errors.hpp"

namespace milr {
namespace {

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
  Shape reduced;  // shape after reduction
};

AxisSplit split(const Shape& shape, std::size_t axis, bool keepdim) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i == axis) {
      if (keepdim) s.reduced.push_back(1);
    } else {
      s.reduced.push_back(shape[i]);
    }
  }
  return s;
}

AxisSplit prepare(const Tensor& x, int axis, bool keepdim,
                  std::string_view op, std::size_t* axis_out) {
  if (x.dim() == 0) throw DimensionError(std::string(op) + " on a scalar");
  const std::size_t ax = detail::normalize_axis(axis, x.dim(), op);
  if (axis_out) *axis_out = ax;
  if (x.shape()[ax] == 0) throw DimensionError(std::string(op) + " over an empty axis");
  return split(x.shape(), ax, keepdim);
}

}  // namespace

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto ix = x.impl();
  return detail::finish("sum", {}, {acc}, {&x}, [ix](const TensorImpl& o) {
    ix->ensure_grad();
    const double g = o.grad[0];
    for (double& v : ix->grad) v += g;
  });
}

Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const AxisSplit s = prepare(x, axis, keepdim, "sum", nullptr);
  const auto xv = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.len; ++l) {
      const double* row = xv.data() + (o * s.len + l) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
    }
  }
  auto ix = x.impl();
  return detail::finish("sum_axis", s.reduced, std::move(out), {&x},
                        [ix, s](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t a = 0; a < s.outer; ++a) {
                            for (std::size_t l = 0; l < s.len; ++l) {
                              double* dst =
                                  ix->grad.data() + (a * s.len + l) * s.inner;
                              const double* g = o.grad.data() + a * s.inner;
                              for (std::size_t i = 0; i < s.inner; ++i) {
                                dst[i] += g[i];
                              }
                            }
                          }
                        });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = detail::normalize_axis(axis, x.dim(), "mean");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.size(ax)));
}

Tensor logsumexp(const Tensor& x, int axis, bool keepdim) {
  const AxisSplit s = prepare(x, axis, keepdim, "logsumexp", nullptr);
  const auto xv = x.data();
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) {
        m = std::max(m, xv[(o * s.len + l) * s.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        acc += std::exp(xv[(o * s.len + l) * s.inner + i] - m);
      }
      out[o * s.inner + i] = m + std::log(acc);
    }
  }
  auto ix = x.impl();
  return detail::finish(
      "logsumexp", s.reduced, std::move(out), {&x},
      [ix, s](const TensorImpl& o) {
        ix->ensure_grad();
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const double y = o.data[a * s.inner + i];
            const double g = o.grad[a * s.inner + i];
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = (a * s.len + l) * s.inner + i;
              ix->grad[idx] += g * std::exp(ix->data[idx] - y);
            }
          }
        }
      });
}

Tensor log_softmax(const Tensor& x, int axis) {
  std::size_t ax = 0;
  const AxisSplit s = prepare(x, axis, true, "log_softmax", &ax);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) {
        m = std::max(m, xv[(o * s.len + l) * s.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        acc += std::exp(xv[(o * s.len + l) * s.inner + i] - m);
      }
      const double lse = m + std::log(acc);
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t idx = (o * s.len + l) * s.inner + i;
        out[idx] = xv[idx] - lse;
      }
    }
  }
  auto ix = x.impl();
  return detail::finish(
      "log_softmax", x.shape(), std::move(out), {&x},
      [ix, s](const TensorImpl& o) {
        ix->ensure_grad();
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            double gsum = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              gsum += o.grad[(a * s.len + l) * s.inner + i];
            }
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = (a * s.len + l) * s.inner + i;
              ix->grad[idx] += o.grad[idx] - std::exp(o.data[idx]) * gsum;
            }
          }
        }
      });
}

Tensor softmax(const Tensor& x, int axis) {
  std::size_t ax = 0;
  const AxisSplit s = prepare(x, axis, true, "softmax", &ax);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) {
        m = std::max(m, xv[(o * s.len + l) * s.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const std::size_t idx = (o * s.len + l) * s.inner + i;
        out[idx] = std::exp(xv[idx] - m);
        acc += out[idx];
      }
      for (std::size_t l = 0; l < s.len; ++l) {
        out[(o * s.len + l) * s.inner + i] /= acc;
      }
    }
  }
  auto ix = x.impl();
  return detail::finish(
      "softmax", x.shape(), std::move(out), {&x},
      [ix, s](const TensorImpl& o) {
        ix->ensure_grad();
        for (std::size_t a = 0; a < s.outer; ++a) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            double dot = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = (a * s.len + l) * s.inner + i;
              dot += o.grad[idx] * o.data[idx];
            }
            for (std::size_t l = 0; l < s.len; ++l) {
              const std::size_t idx = (a * s.len + l) * s.inner + i;
              ix->grad[idx] += o.data[idx] * (o.grad[idx] - dot);
            }
          }
        }
      });
}

}  // namespace milr

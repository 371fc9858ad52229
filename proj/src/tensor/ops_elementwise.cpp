#include <algorithm>
#include <cmath>

#include "detail.hpp"
#include "milr/errors.hpp"
#include "milr/kernels.hpp"

namespace milr {
namespace {

Shape broadcast_shape(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " +
                           shape_string(a) + " with " + shape_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid over `out` (zero along broadcast axes).
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = rank - 1 - k;
    strides[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  return strides;
}

// Calls fn(out_index, offset_a, offset_b) for every output element in
// row-major order.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (counter[ax] < out[ax]) break;
      oa -= sa[ax] * counter[ax];
      ob -= sb[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
}

enum class BinaryKind { add, sub, mul, div };

constexpr std::string_view binary_name(BinaryKind k) {
  switch (k) {
    case BinaryKind::add:
      return "add";
    case BinaryKind::sub:
      return "sub";
    case BinaryKind::mul:
      return "mul";
    case BinaryKind::div:
      return "div";
  }
  return "binary";
}

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const std::string_view name = binary_name(kind);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  const bool same = a.shape() == b.shape();
  const auto& k = kernels::active();

  if (same && kind == BinaryKind::add) {
    k.add(n, av.data(), bv.data(), out.data());
  } else if (same && kind == BinaryKind::mul) {
    k.mul(n, av.data(), bv.data(), out.data());
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         const double x = av[ia];
                         const double y = bv[ib];
                         switch (kind) {
                           case BinaryKind::add:
                             out[i] = x + y;
                             break;
                           case BinaryKind::sub:
                             out[i] = x - y;
                             break;
                           case BinaryKind::mul:
                             out[i] = x * y;
                             break;
                           case BinaryKind::div:
                             out[i] = x / y;
                             break;
                         }
                       });
  }

  auto ia = a.impl();
  auto ib = b.impl();
  return detail::finish(
      name, out_shape, std::move(out), {&a, &b},
      [ia, ib, kind, out_shape](const TensorImpl& o) {
        const auto sa = broadcast_strides(ia->shape, out_shape);
        const auto sb = broadcast_strides(ib->shape, out_shape);
        const bool ga = ia->requires_grad;
        const bool gb = ib->requires_grad;
        if (ga) ia->ensure_grad();
        if (gb) ib->ensure_grad();
        const auto& g = o.grad;
        for_each_broadcast(
            out_shape, sa, sb,
            [&](std::size_t i, std::size_t oa, std::size_t ob) {
              const double gi = g[i];
              switch (kind) {
                case BinaryKind::add:
                  if (ga) ia->grad[oa] += gi;
                  if (gb) ib->grad[ob] += gi;
                  break;
                case BinaryKind::sub:
                  if (ga) ia->grad[oa] += gi;
                  if (gb) ib->grad[ob] -= gi;
                  break;
                case BinaryKind::mul:
                  if (ga) ia->grad[oa] += gi * ib->data[ob];
                  if (gb) ib->grad[ob] += gi * ia->data[oa];
                  break;
                case BinaryKind::div: {
                  const double y = ib->data[ob];
                  if (ga) ia->grad[oa] += gi / y;
                  if (gb) ib->grad[ob] -= gi * ia->data[oa] / (y * y);
                  break;
                }
              }
            });
      });
}

// Unary op whose derivative is expressed through input x and output y.
template <typename F, typename D>
Tensor unary(const Tensor& x, std::string_view name, F f, D dfdx) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  auto ix = x.impl();
  return detail::finish(name, x.shape(), std::move(out), {&x},
                        [ix, dfdx](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            ix->grad[i] +=
                                o.grad[i] * dfdx(ix->data[i], o.data[i]);
                          }
                        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::add);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::sub);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::mul);
}
Tensor div(const Tensor& a, const Tensor& b) {
  return binary(a, b, BinaryKind::div);
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, "square", [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  return unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& x) { return neg(x); }
Tensor operator*(const Tensor& x, double factor) { return scale(x, factor); }
Tensor operator*(double factor, const Tensor& x) { return scale(x, factor); }
Tensor operator+(const Tensor& x, double value) { return add_scalar(x, value); }

}  // namespace milr

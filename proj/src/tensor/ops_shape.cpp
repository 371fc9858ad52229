#include <algorithm>
#include <numeric>

#include "detail.hpp"
#include "milr/errors.hpp"
#include "milr/kernels.hpp"

namespace milr {

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " to " +
                         shape_string(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto ix = x.impl();
  return detail::finish("reshape", std::move(shape), std::move(out), {&x},
                        [ix](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            ix->grad[i] += o.grad[i];
                          }
                        });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (shape.size() < x.dim()) {
    throw DimensionError("broadcast_to: target rank smaller than source");
  }
  const std::size_t offset = shape.size() - x.dim();
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const std::size_t d = x.shape()[i];
    if (d != 1 && d != shape[offset + i]) {
      throw DimensionError("broadcast_to: cannot broadcast " +
                           shape_string(x.shape()) + " to " +
                           shape_string(shape));
    }
  }
  // x + zeros gives the broadcast and its reduction rule.
  return add(x, Tensor::zeros(shape));
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.dim();
  if (order.size() != rank) throw DimensionError("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : order) {
    if (a >= rank || seen[a]) throw DimensionError("permute: invalid order");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in[order[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[order[i]];

  // map[i] = source offset of output element i
  const std::size_t n = x.numel();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      src += src_strides[ax];
      if (counter[ax] < out_shape[ax]) break;
      src -= src_strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*map)[i]];
  auto ix = x.impl();
  return detail::finish("permute", out_shape, std::move(out), {&x},
                        [ix, map](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                            ix->grad[(*map)[i]] += o.grad[i];
                          }
                        });
}

Tensor transpose(const Tensor& x) {
  if (x.dim() != 2) throw DimensionError("transpose: expects a 2-D tensor");
  return permute(x, {1, 0});
}

Tensor index_select(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.dim() == 0) throw DimensionError("index_select on a scalar");
  if (rows.empty()) throw DimensionError("index_select: empty index list");
  const std::size_t n_rows = x.size(0);
  const std::size_t row_len = x.numel() / n_rows;
  for (std::size_t r : rows) {
    if (r >= n_rows) throw DimensionError("index_select: row out of range");
  }
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  const auto xv = x.data();
  std::vector<double> out(rows.size() * row_len);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.begin() + rows[i] * row_len, row_len,
                out.begin() + i * row_len);
  }
  auto ix = x.impl();
  return detail::finish("index_select", out_shape, std::move(out), {&x},
                        [ix, rows, row_len](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t i = 0; i < rows.size(); ++i) {
                            for (std::size_t j = 0; j < row_len; ++j) {
                              ix->grad[rows[i] * row_len + j] +=
                                  o.grad[i * row_len + j];
                            }
                          }
                        });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape out_shape = parts.front().shape();
  if (out_shape.empty()) throw DimensionError("concat of scalars");
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out_shape.size() ||
        !std::equal(s.begin() + 1, s.end(), out_shape.begin() + 1)) {
      throw DimensionError("concat: trailing dimensions differ");
    }
    rows += s[0];
  }
  out_shape[0] = rows;
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl());

  Tape* tape = active_tape();
  bool needs = false;
  for (const Tensor& p : parts) needs = needs || p.requires_grad();
  Tensor result = detail::finish("concat", out_shape, std::move(out), {},
                                 nullptr);
  if (tape && needs) {
    result.impl()->requires_grad = true;
    Tape::Record rec;
    rec.op = "concat";
    rec.inputs = impls;
    rec.output = result.impl();
    rec.backward = [impls](const TensorImpl& o) {
      std::size_t offset = 0;
      for (const auto& p : impls) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->data.size(); ++i) {
            p->grad[i] += o.grad[offset + i];
          }
        }
        offset += p->data.size();
      }
    };
    tape->record(std::move(rec));
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> transposed(const double* src, std::size_t rows,
                               std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2) {
    throw DimensionError("matmul expects 2-D operands, got " +
                         shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.size(0);
  const std::size_t k = a.size(1);
  const std::size_t n = b.size(1);
  if (b.size(0) != k) {
    throw DimensionError("matmul inner dimensions differ: " +
                         shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::active().gemm(m, n, k, a.data().data(), k, b.data().data(), n,
                         out.data(), n, false);
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::finish(
      "matmul", {m, n}, std::move(out), {&a, &b},
      [ia, ib, m, n, k](const TensorImpl& o) {
        const auto& kt = kernels::active();
        if (ia->requires_grad) {
          // dA[m x k] += dC[m x n] * B^T[n x k]
          ia->ensure_grad();
          const auto bt = transposed(ib->data.data(), k, n);
          kt.gemm(m, k, n, o.grad.data(), n, bt.data(), k, ia->grad.data(), k,
                  true);
        }
        if (ib->requires_grad) {
          // dB[k x n] += A^T[k x m] * dC[m x n]
          ib->ensure_grad();
          const auto at = transposed(ia->data.data(), m, k);
          kt.gemm(k, n, m, at.data(), m, o.grad.data(), n, ib->grad.data(), n,
                  true);
        }
      });
}

}  // namespace milr

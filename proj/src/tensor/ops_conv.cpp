#include <algorithm>

#include "detail.hpp"
#include "milr/errors.hpp"
#include "milr/kernels.hpp"

namespace milr {
namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return batch * out_h * out_w; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight,
                           const Conv2dOptions& opt) {
  if (input.dim() != 4 || weight.dim() != 4) {
    throw DimensionError("conv2d expects input [B,C,H,W] and weight [O,C,kh,kw]");
  }
  if (opt.stride == 0) throw DimensionError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = input.size(0);
  g.channels = input.size(1);
  g.height = input.size(2);
  g.width = input.size(3);
  g.out_channels = weight.size(0);
  g.kh = weight.size(2);
  g.kw = weight.size(3);
  g.stride = opt.stride;
  g.padding = opt.padding;
  if (weight.size(1) != g.channels) {
    throw DimensionError("conv2d: weight expects " +
                         std::to_string(weight.size(1)) +
                         " input channels, got " + std::to_string(g.channels));
  }
  const std::size_t ph = g.height + 2 * g.padding;
  const std::size_t pw = g.width + 2 * g.padding;
  if (g.kh > ph || g.kw > pw) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" +
                         std::to_string(g.kw) + " larger than padded input " +
                         std::to_string(ph) + "x" + std::to_string(pw));
  }
  g.out_h = (ph - g.kh) / g.stride + 1;
  g.out_w = (pw - g.kw) / g.stride + 1;
  return g;
}

// cols[patch x positions]
std::vector<double> im2col(const ConvGeometry& g, const double* in) {
  const std::size_t npos = g.positions();
  std::vector<double> cols(g.patch() * npos, 0.0);
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        double* row = cols.data() + ((c * g.kh + dy) * g.kw + dx) * npos;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* src = in + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + dy) -
                                     static_cast<std::ptrdiff_t>(g.padding);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
            double* dst = row + b * plane + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t x =
                  static_cast<std::ptrdiff_t>(ox * g.stride + dx) -
                  static_cast<std::ptrdiff_t>(g.padding);
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[ox] = src[static_cast<std::size_t>(y) * g.width +
                            static_cast<std::size_t>(x)];
            }
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const ConvGeometry& g, const double* cols, double* in_grad) {
  const std::size_t npos = g.positions();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t dy = 0; dy < g.kh; ++dy) {
      for (std::size_t dx = 0; dx < g.kw; ++dx) {
        const double* row = cols + ((c * g.kh + dy) * g.kw + dx) * npos;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* dst = in_grad + (b * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + dy) -
                                     static_cast<std::ptrdiff_t>(g.padding);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
            const double* src = row + b * plane + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t x =
                  static_cast<std::ptrdiff_t>(ox * g.stride + dx) -
                  static_cast<std::ptrdiff_t>(g.padding);
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[static_cast<std::size_t>(y) * g.width +
                  static_cast<std::size_t>(x)] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options) {
  const ConvGeometry g = conv_geometry(input, weight, options);
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != g.out_channels)) {
    throw DimensionError("conv2d: bias must have shape [" +
                         std::to_string(g.out_channels) + "]");
  }
  const std::size_t npos = g.positions();
  const std::size_t plane = g.out_h * g.out_w;
  auto cols = std::make_shared<std::vector<double>>(
      im2col(g, input.data().data()));
  std::vector<double> out_mat(g.out_channels * npos);
  const auto& kt = kernels::active();
  kt.gemm(g.out_channels, npos, g.patch(), weight.data().data(), g.patch(),
          cols->data(), npos, out_mat.data(), npos, false);

  std::vector<double> out(g.batch * g.out_channels * plane);
  const double* bv = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* src = out_mat.data() + o * npos + b * plane;
      double* dst = out.data() + (b * g.out_channels + o) * plane;
      const double add = bv ? bv[o] : 0.0;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + add;
    }
  }

  auto ii = input.impl();
  auto iw = weight.impl();
  auto ib = bias.defined() ? bias.impl() : nullptr;
  return detail::finish(
      "conv2d", {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out),
      {&input, &weight, &bias},
      [ii, iw, ib, cols, g](const TensorImpl& o) {
        const auto& kt = kernels::active();
        const std::size_t npos = g.positions();
        const std::size_t plane = g.out_h * g.out_w;
        std::vector<double> gmat(g.out_channels * npos);
        for (std::size_t b = 0; b < g.batch; ++b) {
          for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            std::copy_n(o.grad.data() + (b * g.out_channels + oc) * plane,
                        plane, gmat.data() + oc * npos + b * plane);
          }
        }
        if (ib && ib->requires_grad) {
          ib->ensure_grad();
          for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            double acc = 0.0;
            for (std::size_t p = 0; p < npos; ++p) acc += gmat[oc * npos + p];
            ib->grad[oc] += acc;
          }
        }
        if (iw->requires_grad) {
          iw->ensure_grad();
          std::vector<double> cols_t(npos * g.patch());
          for (std::size_t r = 0; r < g.patch(); ++r) {
            for (std::size_t p = 0; p < npos; ++p) {
              cols_t[p * g.patch() + r] = (*cols)[r * npos + p];
            }
          }
          kt.gemm(g.out_channels, g.patch(), npos, gmat.data(), npos,
                  cols_t.data(), g.patch(), iw->grad.data(), g.patch(), true);
        }
        if (ii->requires_grad) {
          ii->ensure_grad();
          std::vector<double> w_t(g.patch() * g.out_channels);
          for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
            for (std::size_t r = 0; r < g.patch(); ++r) {
              w_t[r * g.out_channels + oc] = iw->data[oc * g.patch() + r];
            }
          }
          std::vector<double> dcols(g.patch() * npos);
          kt.gemm(g.patch(), npos, g.out_channels, w_t.data(), g.out_channels,
                  gmat.data(), npos, dcols.data(), npos, false);
          col2im_add(g, dcols.data(), ii->grad.data());
        }
      });
}

Tensor avgpool2d(const Tensor& x, std::size_t kernel) {
  if (x.dim() != 4) throw DimensionError("avgpool2d expects [B,C,H,W]");
  if (kernel == 0) throw DimensionError("avgpool2d: kernel must be positive");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t h = x.size(2);
  const std::size_t w = x.size(3);
  if (kernel > h || kernel > w) {
    throw DimensionError("avgpool2d: kernel larger than input");
  }
  const std::size_t oh = h / kernel;
  const std::size_t ow = w / kernel;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  const auto xv = x.data();
  std::vector<double> out(bc * oh * ow, 0.0);
  for (std::size_t p = 0; p < bc; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < kernel; ++dy) {
          for (std::size_t dx = 0; dx < kernel; ++dx) {
            acc += xv[(p * h + oy * kernel + dy) * w + ox * kernel + dx];
          }
        }
        out[(p * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  auto ix = x.impl();
  return detail::finish(
      "avgpool2d", {x.size(0), x.size(1), oh, ow}, std::move(out), {&x},
      [ix, bc, h, w, oh, ow, kernel, inv](const TensorImpl& o) {
        ix->ensure_grad();
        for (std::size_t p = 0; p < bc; ++p) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double gv = o.grad[(p * oh + oy) * ow + ox] * inv;
              for (std::size_t dy = 0; dy < kernel; ++dy) {
                for (std::size_t dx = 0; dx < kernel; ++dx) {
                  ix->grad[(p * h + oy * kernel + dy) * w + ox * kernel + dx] +=
                      gv;
                }
              }
            }
          }
        }
      });
}

Tensor spatial_mean(const Tensor& x) {
  if (x.dim() != 4) throw DimensionError("spatial_mean expects [B,C,H,W]");
  const std::size_t bc = x.size(0) * x.size(1);
  const std::size_t plane = x.size(2) * x.size(3);
  const double inv = 1.0 / static_cast<double>(plane);
  const auto xv = x.data();
  std::vector<double> out(bc);
  for (std::size_t p = 0; p < bc; ++p) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += xv[p * plane + i];
    out[p] = acc * inv;
  }
  auto ix = x.impl();
  return detail::finish("spatial_mean", {x.size(0), x.size(1)}, std::move(out),
                        {&x}, [ix, bc, plane, inv](const TensorImpl& o) {
                          ix->ensure_grad();
                          for (std::size_t p = 0; p < bc; ++p) {
                            const double gv = o.grad[p] * inv;
                            for (std::size_t i = 0; i < plane; ++i) {
                              ix->grad[p * plane + i] += gv;
                            }
                          }
                        });
}

}  // namespace milr

#pragma once

#include <array>

#include "skimba/ops.hpp"

namespace skimba {

using Triple = std::array<std::size_t, 3>;

/// Geometry of a 3-D cross-correlation. Spatial axes are (l, w, h).
struct ConvGeometry {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  Triple dilation{1, 1, 1};

  static ConvGeometry same(const Triple& kernel, const Triple& dilation = {1, 1, 1}) {
    ConvGeometry g;
    g.dilation = dilation;
    for (int a = 0; a < 3; ++a) g.padding[a] = dilation[a] * (kernel[a] - 1) / 2;
    return g;
  }
};

/// floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1, or throws when the
/// window does not fit.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, std::size_t dilation) {
  const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) -
                         static_cast<long long>(dilation * (k - 1)) - 1;
  if (span < 0 || stride == 0) {
    throw ShapeError("convolution output extent is not positive (input " +
                     std::to_string(in) + ", kernel " + std::to_string(k) + ")");
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

namespace detail {

struct ConvPlan {
  std::size_t channels;  // input channels of the correlation
  Triple in;             // input spatial extents
  Triple kernel;
  Triple out;
  ConvGeometry geom;

  std::size_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_volume() const { return out[0] * out[1] * out[2]; }
  bool pointwise() const {
    return kernel_volume() == 1 && geom.stride == Triple{1, 1, 1} &&
           geom.padding == Triple{0, 0, 0};
  }
};

// Visits (row of the column matrix, output position, input position) for every
// in-bounds tap.
template <typename Visit>
void for_each_tap(const ConvPlan& p, Visit&& visit) {
  const auto& g = p.geom;
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.channels; ++c) {
    for (std::size_t kl = 0; kl < p.kernel[0]; ++kl) {
      for (std::size_t kw = 0; kw < p.kernel[1]; ++kw) {
        for (std::size_t kh = 0; kh < p.kernel[2]; ++kh, ++row) {
          const std::size_t cbase = c * p.in_volume();
          for (std::size_t ol = 0; ol < p.out[0]; ++ol) {
            const long long il = static_cast<long long>(ol * g.stride[0] + kl * g.dilation[0]) -
                                 static_cast<long long>(g.padding[0]);
            if (il < 0 || il >= static_cast<long long>(p.in[0])) continue;
            for (std::size_t ow = 0; ow < p.out[1]; ++ow) {
              const long long iw =
                  static_cast<long long>(ow * g.stride[1] + kw * g.dilation[1]) -
                  static_cast<long long>(g.padding[1]);
              if (iw < 0 || iw >= static_cast<long long>(p.in[1])) continue;
              const std::size_t obase = (ol * p.out[1] + ow) * p.out[2];
              const std::size_t ibase =
                  cbase + (static_cast<std::size_t>(il) * p.in[1] + static_cast<std::size_t>(iw)) *
                              p.in[2];
              for (std::size_t oh = 0; oh < p.out[2]; ++oh) {
                const long long ih =
                    static_cast<long long>(oh * g.stride[2] + kh * g.dilation[2]) -
                    static_cast<long long>(g.padding[2]);
                if (ih < 0 || ih >= static_cast<long long>(p.in[2])) continue;
                visit(row, obase + oh, ibase + static_cast<std::size_t>(ih));
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T> im2col(const ConvPlan& p, const T* x) {
  const std::size_t cols = p.out_volume();
  std::vector<T> col(p.channels * p.kernel_volume() * cols, T(0));
  for_each_tap(p, [&](std::size_t row, std::size_t o, std::size_t i) {
    col[row * cols + o] = x[i];
  });
  return col;
}

template <typename T>
void col2im_add(const ConvPlan& p, const T* col, T* x) {
  const std::size_t cols = p.out_volume();
  for_each_tap(p, [&](std::size_t row, std::size_t o, std::size_t i) {
    x[i] += col[row * cols + o];
  });
}

inline Triple spatial_of(const Shape& s) { return {s[1], s[2], s[3]}; }

inline void check_weight(const Shape& w, std::size_t rank) {
  if (w.size() != rank) {
    throw ShapeError("convolution weight must be rank-5, got " + shape_str(w));
  }
}

}  // namespace detail

/// Cross-correlation of a C x L x W x H volume with an O x C x kl x kw x kh
/// weight. Bias has O elements (optional).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvGeometry& geom = {}) {
  if (x.rank() != 4) throw ShapeError("conv3d input must be C x L x W x H, got " + shape_str(x.shape()));
  detail::check_weight(weight.shape(), 5);
  const std::size_t out_ch = weight.extent(0);
  if (weight.extent(1) != x.extent(0)) {
    throw ShapeError("conv3d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && bias.size() != out_ch) throw ShapeError("conv3d bias size");
  detail::ConvPlan plan{x.extent(0), detail::spatial_of(x.shape()),
                        {weight.extent(2), weight.extent(3), weight.extent(4)}, {}, geom};
  for (int a = 0; a < 3; ++a) {
    plan.out[a] = conv_out_extent(plan.in[a], plan.kernel[a], geom.stride[a], geom.padding[a],
                                  geom.dilation[a]);
  }
  const std::size_t rows = plan.channels * plan.kernel_volume();
  const std::size_t cols = plan.out_volume();
  std::vector<T> out(out_ch * cols);
  {
    std::vector<T> col_storage;
    const T* col = x.data().data();
    if (!plan.pointwise()) {
      col_storage = detail::im2col(plan, x.data().data());
      col = col_storage.data();
    }
    MatMap<T> y(out.data(), out_ch, cols);
    y.noalias() = ConstMatMap<T>(weight.data().data(), out_ch, rows) * ConstMatMap<T>(col, rows, cols);
    if (bias.defined()) {
      for (std::size_t o = 0; o < out_ch; ++o) y.row(o).array() += bias[o];
    }
  }
  Shape shape{out_ch, plan.out[0], plan.out[1], plan.out[2]};
  return make_result<T>(
      std::move(shape), std::move(out), {x, weight, bias},
      [x, weight, bias, plan, out_ch, rows, cols](std::span<const T> g) {
        ConstMatMap<T> gy(g.data(), out_ch, cols);
        if (T* gb = grad_sink(bias)) {
          // Plain loop: Eigen's vectorized sum peels by pointer alignment, which
          // makes the result vary between otherwise identical runs.
          for (std::size_t o = 0; o < out_ch; ++o) {
            T acc = 0;
            for (std::size_t i = 0; i < cols; ++i) acc += g[o * cols + i];
            gb[o] += acc;
          }
        }
        T* gw = grad_sink(weight);
        T* gx = grad_sink(x);
        if (!gw && !gx) return;
        if (plan.pointwise()) {
          if (gw) {
            MatMap<T>(gw, out_ch, rows).noalias() +=
                gy * ConstMatMap<T>(x.data().data(), rows, cols).transpose();
          }
          if (gx) {
            MatMap<T>(gx, rows, cols).noalias() +=
                ConstMatMap<T>(weight.data().data(), out_ch, rows).transpose() * gy;
          }
          return;
        }
        if (gw) {
          std::vector<T> col = detail::im2col(plan, x.data().data());
          MatMap<T>(gw, out_ch, rows).noalias() +=
              gy * ConstMatMap<T>(col.data(), rows, cols).transpose();
        }
        if (gx) {
          std::vector<T> dcol(rows * cols);
          MatMap<T>(dcol.data(), rows, cols).noalias() =
              ConstMatMap<T>(weight.data().data(), out_ch, rows).transpose() * gy;
          detail::col2im_add(plan, dcol.data(), gx);
        }
      });
}

/// Adjoint of conv3d with the same weight layout: weight is Cx x Cy x k...,
/// where x has Cx channels and the result has Cy channels. `output_padding`
/// extends the far edge so strided geometries can hit an exact extent.
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           const ConvGeometry& geom, const Triple& output_padding = {0, 0, 0}) {
  if (x.rank() != 4) throw ShapeError("conv_transpose3d input must be rank-4, got " + shape_str(x.shape()));
  detail::check_weight(weight.shape(), 5);
  if (weight.extent(0) != x.extent(0)) {
    throw ShapeError("conv_transpose3d channel mismatch: input " + shape_str(x.shape()) +
                     ", weight " + shape_str(weight.shape()));
  }
  const std::size_t in_ch = x.extent(0);
  const std::size_t out_ch = weight.extent(1);
  if (bias.defined() && bias.size() != out_ch) throw ShapeError("conv_transpose3d bias size");
  detail::ConvPlan plan{out_ch, {}, {weight.extent(2), weight.extent(3), weight.extent(4)},
                        detail::spatial_of(x.shape()), geom};
  for (int a = 0; a < 3; ++a) {
    const long long extent = static_cast<long long>(plan.out[a] - 1) * geom.stride[a] -
                             2 * static_cast<long long>(geom.padding[a]) +
                             static_cast<long long>(geom.dilation[a] * (plan.kernel[a] - 1)) + 1 +
                             static_cast<long long>(output_padding[a]);
    if (extent <= 0) throw ShapeError("conv_transpose3d output extent is not positive");
    plan.in[a] = static_cast<std::size_t>(extent);
    if (conv_out_extent(plan.in[a], plan.kernel[a], geom.stride[a], geom.padding[a],
                        geom.dilation[a]) != plan.out[a]) {
      throw ShapeError("conv_transpose3d output padding inconsistent with geometry");
    }
  }
  const std::size_t rows = out_ch * plan.kernel_volume();
  const std::size_t cols = plan.out_volume();
  std::vector<T> out(out_ch * plan.in_volume(), T(0));
  {
    std::vector<T> col(rows * cols);
    MatMap<T>(col.data(), rows, cols).noalias() =
        ConstMatMap<T>(weight.data().data(), in_ch, rows).transpose() *
        ConstMatMap<T>(x.data().data(), in_ch, cols);
    detail::col2im_add(plan, col.data(), out.data());
    if (bias.defined()) {
      const std::size_t vol = plan.in_volume();
      for (std::size_t o = 0; o < out_ch; ++o)
        for (std::size_t i = 0; i < vol; ++i) out[o * vol + i] += bias[o];
    }
  }
  Shape shape{out_ch, plan.in[0], plan.in[1], plan.in[2]};
  return make_result<T>(
      std::move(shape), std::move(out), {x, weight, bias},
      [x, weight, bias, plan, in_ch, out_ch, rows, cols](std::span<const T> g) {
        if (T* gb = grad_sink(bias)) {
          const std::size_t vol = plan.in_volume();
          for (std::size_t o = 0; o < out_ch; ++o)
            for (std::size_t i = 0; i < vol; ++i) gb[o] += g[o * vol + i];
        }
        T* gw = grad_sink(weight);
        T* gx = grad_sink(x);
        if (!gw && !gx) return;
        std::vector<T> dcol = detail::im2col(plan, g.data());
        ConstMatMap<T> dm(dcol.data(), rows, cols);
        if (gx) {
          MatMap<T>(gx, in_ch, cols).noalias() +=
              ConstMatMap<T>(weight.data().data(), in_ch, rows) * dm;
        }
        if (gw) {
          MatMap<T>(gw, in_ch, rows).noalias() +=
              ConstMatMap<T>(x.data().data(), in_ch, cols) * dm.transpose();
        }
      });
}

}  // namespace skimba

#pragma once

#include <Eigen/Core>

#include "skimba/tensor.hpp"

namespace skimba {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " +
                       shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat source index for each element of `out` when `in` is broadcast to it.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> in_stride(rank, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t axis_in = in.size() - 1 - k;
    const std::size_t axis_out = rank - 1 - k;
    in_stride[axis_out] = in[axis_in] == 1 ? 0 : stride;
    stride *= in[axis_in];
  }
  std::vector<std::size_t> index(numel(out));
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out[ax]) {
        src += in_stride[ax];
        break;
      }
      src -= in_stride[ax] * (out[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.size();
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    return make_result<T>(a.shape(), std::move(out), {a, b},
                          [a, b, da, db](std::span<const T> g) {
                            const T* pa = a.data().data();
                            const T* pb = b.data().data();
                            if (T* ga = grad_sink(a)) {
                              for (std::size_t i = 0; i < g.size(); ++i)
                                ga[i] += g[i] * da(pa[i], pb[i]);
                            }
                            if (T* gb = grad_sink(b)) {
                              for (std::size_t i = 0; i < g.size(); ++i)
                                gb[i] += g[i] * db(pa[i], pb[i]);
                            }
                          });
  }
  Shape shape = broadcast_shape(a.shape(), b.shape());
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), shape));
  std::vector<T> out(numel(shape));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[(*ia)[i]], b[(*ib)[i]]);
  return make_result<T>(std::move(shape), std::move(out), {a, b},
                        [a, b, ia, ib, da, db](std::span<const T> g) {
                          T* ga = grad_sink(a);
                          T* gb = grad_sink(b);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T va = a[(*ia)[i]];
                            const T vb = b[(*ib)[i]];
                            if (ga) ga[(*ia)[i]] += g[i] * da(va, vb);
                            if (gb) gb[(*ib)[i]] += g[i] * db(va, vb);
                          }
                        });
}

// `deriv(x, y)` is dy/dx given input x and output y.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  auto result_values = std::make_shared<std::vector<T>>(out);
  return make_result<T>(x.shape(), std::move(out), {x},
                        [x, result_values, deriv](std::span<const T> g) {
                          T* gx = grad_sink(x);
                          const T* px = x.data().data();
                          const T* py = result_values->data();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            gx[i] += g[i] * deriv(px[i], py[i]);
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (trailing-dimension broadcasting).

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op(
      x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  return detail::unary_op(
      x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, T(-1));
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }
template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

// ---------------------------------------------------------------------------
// Activations.

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01)) {
  return detail::unary_op(
      x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
T softplus_value(T v) {
  return v > T(20) ? v : std::log1p(std::exp(v));
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return softplus_value(v); },
      [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>(Shape{1}, {total}, {x}, [x](std::span<const T> g) {
    T* gx = grad_sink(x);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  return mean(square(sub(a, b)));
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " +
                     shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.values(), {x},
                        [x](std::span<const T> g) {
                          T* gx = grad_sink(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

/// out[i] = x[index[i]]; backward scatters. Indices address the flat data.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::shared_ptr<const std::vector<std::size_t>> index,
                 Shape shape) {
  if (index->size() != numel(shape)) {
    throw ShapeError("gather index length does not match " + shape_str(shape));
  }
  std::vector<T> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[(*index)[i]];
  }
  return make_result<T>(std::move(shape), std::move(out), {x},
                        [x, index](std::span<const T> g) {
                          T* gx = grad_sink(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[(*index)[i]] += g[i];
                        });
}

inline std::vector<std::size_t> permute_index(const Shape& shape,
                                              const std::vector<std::size_t>& axes,
                                              Shape& out_shape) {
  const std::size_t rank = shape.size();
  if (axes.size() != rank) throw ShapeError("permute axes rank mismatch");
  std::vector<std::size_t> stride(rank, 1);
  for (std::size_t ax = rank - 1; ax-- > 0;) stride[ax] = stride[ax + 1] * shape[ax + 1];
  out_shape.assign(rank, 0);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = shape.at(axes[i]);
  std::vector<std::size_t> index(numel(shape));
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    index[i] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      const std::size_t s = stride[axes[ax]];
      if (++counter[ax] < out_shape[ax]) {
        src += s;
        break;
      }
      src -= s * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return index;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  Shape out_shape;
  auto index = std::make_shared<const std::vector<std::size_t>>(
      permute_index(x.shape(), axes, out_shape));
  return gather(x, index, out_shape);
}

/// Rank-2 transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  return permute(x, {1, 0});
}

/// Concatenation along axis.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t ax = 0; ax < s.size(); ++ax) {
      if (ax != axis && s[ax] != shape[ax]) {
        throw ShapeError("concat extents mismatch: " + shape_str(s) + " vs " +
                         shape_str(shape));
      }
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= shape[ax];
  for (std::size_t ax = axis + 1; ax < shape.size(); ++ax) inner *= shape[ax];
  shape[axis] = total;
  std::vector<T> out(numel(shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.extent(axis) * inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * len, len, out.data() + o * total * inner + offset);
    }
    offset += len;
  }
  // Tensor inputs are copied into the closure; make_result needs a list.
  Tensor<T> result(shape, std::move(out));
  if (!grad_enabled()) return result;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return result;
  auto& node = *result.node();
  node.requires_grad = true;
  for (const auto& p : parts) {
    if (p.requires_grad()) node.parents.push_back(p.node());
  }
  node.backward_fn = [parts, offsets, outer, inner, total, axis](Node<T>& self) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      T* gp = grad_sink(parts[k]);
      if (!gp) continue;
      const std::size_t len = parts[k].extent(axis) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * total * inner + offsets[k];
        for (std::size_t i = 0; i < len; ++i) gp[o * len + i] += src[i];
      }
    }
  };
  return result;
}

/// Contiguous range [start, start + length) along axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  Shape shape = x.shape();
  if (axis >= shape.size() || start + length > shape[axis] || length == 0) {
    throw ShapeError("slice out of range on " + shape_str(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= shape[ax];
  for (std::size_t ax = axis + 1; ax < shape.size(); ++ax) inner *= shape[ax];
  const std::size_t full = shape[axis];
  shape[axis] = length;
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(numel(shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < length * inner; ++i)
      index->push_back(o * full * inner + start * inner + i);
  return gather(x, std::shared_ptr<const std::vector<std::size_t>>(index), shape);
}

// ---------------------------------------------------------------------------
// Dense algebra.

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  return make_result<T>(Shape{m, n}, std::move(out), {a, b},
                        [a, b, m, k, n](std::span<const T> g) {
                          ConstMatMap<T> gm(g.data(), m, n);
                          if (T* ga = grad_sink(a)) {
                            MatMap<T>(ga, m, k).noalias() +=
                                gm * ConstMatMap<T>(b.data().data(), k, n).transpose();
                          }
                          if (T* gb = grad_sink(b)) {
                            MatMap<T>(gb, k, n).noalias() +=
                                ConstMatMap<T>(a.data().data(), m, k).transpose() * gm;
                          }
                        });
}

/// x (rows x in) · weight (in x out) + bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Normalization.

/// Normalizes each slice over the trailing `normalized` elements; gain and bias
/// (optional) have that many elements.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::size_t normalized, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps = T(1e-5)) {
  if (normalized == 0 || x.size() % normalized != 0) {
    throw ShapeError("layer_norm extent does not divide " + shape_str(x.shape()));
  }
  if (gain.defined() && gain.size() != normalized) throw ShapeError("layer_norm gain size");
  if (bias.defined() && bias.size() != normalized) throw ShapeError("layer_norm bias size");
  const std::size_t rows = x.size() / normalized;
  auto xhat = std::make_shared<std::vector<T>>(x.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.data().data() + r * normalized;
    T mu = 0;
    for (std::size_t i = 0; i < normalized; ++i) mu += px[i];
    mu /= static_cast<T>(normalized);
    T var = 0;
    for (std::size_t i = 0; i < normalized; ++i) var += (px[i] - mu) * (px[i] - mu);
    var /= static_cast<T>(normalized);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < normalized; ++i) {
      const T h = (px[i] - mu) * is;
      (*xhat)[r * normalized + i] = h;
      const T gv = gain.defined() ? gain[i] : T(1);
      const T bv = bias.defined() ? bias[i] : T(0);
      out[r * normalized + i] = h * gv + bv;
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, inv_std, rows, normalized](std::span<const T> g) {
        T* gx = grad_sink(x);
        T* gg = grad_sink(gain);
        T* gb = grad_sink(bias);
        std::vector<T> dh(normalized);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* h = xhat->data() + r * normalized;
          const T* gr = g.data() + r * normalized;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t i = 0; i < normalized; ++i) {
            if (gg) gg[i] += gr[i] * h[i];
            if (gb) gb[i] += gr[i];
            dh[i] = gr[i] * (gain.defined() ? gain[i] : T(1));
            mean_dh += dh[i];
            mean_dh_h += dh[i] * h[i];
          }
          if (!gx) continue;
          mean_dh /= static_cast<T>(normalized);
          mean_dh_h /= static_cast<T>(normalized);
          const T is = (*inv_std)[r];
          for (std::size_t i = 0; i < normalized; ++i) {
            gx[r * normalized + i] += is * (dh[i] - mean_dh - h[i] * mean_dh_h);
          }
        }
      });
}

/// Per-channel normalization over the spatial extents of a C x ... volume.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  if (x.rank() < 2) throw ShapeError("instance_norm needs a channel axis");
  const std::size_t channels = x.extent(0);
  return reshape(layer_norm(reshape(x, Shape{channels, x.size() / channels}),
                            x.size() / channels, Tensor<T>(), Tensor<T>(), eps),
                 x.shape());
}

/// Softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("softmax axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= shape[ax];
  for (std::size_t ax = axis + 1; ax < shape.size(); ++ax) inner *= shape[ax];
  const std::size_t n = shape[axis];
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      T z = 0;
      for (std::size_t k = 0; k < n; ++k) {
        out[base + k * inner] = std::exp(x[base + k * inner] - mx);
        z += out[base + k * inner];
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  auto probs = std::make_shared<std::vector<T>>(out);
  return make_result<T>(shape, std::move(out), {x},
                        [x, probs, outer, inner, n](std::span<const T> g) {
                          T* gx = grad_sink(x);
                          const auto& p = *probs;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = o * n * inner + in;
                              T dot = 0;
                              for (std::size_t k = 0; k < n; ++k)
                                dot += g[base + k * inner] * p[base + k * inner];
                              for (std::size_t k = 0; k < n; ++k) {
                                const std::size_t i = base + k * inner;
                                gx[i] += p[i] * (g[i] - dot);
                              }
                            }
                          }
                        });
}

/// Weighted resampling: out[c, dst] = sum of w * x[c, src] over the entries.
/// Rows of x are channels; used for feature lifting.
template <typename T>
struct ResampleEntry {
  std::size_t dst;
  std::size_t src;
  T weight;
};

template <typename T>
Tensor<T> resample(const Tensor<T>& x, std::shared_ptr<const std::vector<ResampleEntry<T>>> entries,
                   Shape out_shape) {
  const std::size_t channels = x.extent(0);
  if (out_shape.empty() || out_shape[0] != channels) {
    throw ShapeError("resample must keep the channel axis");
  }
  const std::size_t in_sp = x.size() / channels;
  const std::size_t out_sp = numel(out_shape) / channels;
  std::vector<T> out(numel(out_shape), T(0));
  for (std::size_t c = 0; c < channels; ++c) {
    const T* px = x.data().data() + c * in_sp;
    T* po = out.data() + c * out_sp;
    for (const auto& e : *entries) po[e.dst] += e.weight * px[e.src];
  }
  return make_result<T>(std::move(out_shape), std::move(out), {x},
                        [x, entries, channels, in_sp, out_sp](std::span<const T> g) {
                          T* gx = grad_sink(x);
                          for (std::size_t c = 0; c < channels; ++c) {
                            for (const auto& e : *entries)
                              gx[c * in_sp + e.src] += e.weight * g[c * out_sp + e.dst];
                          }
                        });
}

}  // namespace skimba

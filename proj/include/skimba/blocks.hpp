#pragma once

#include <utility>

#include "skimba/conv.hpp"
#include "skimba/params.hpp"

namespace skimba {

inline constexpr float kLeakySlope = 0.01f;

/// Shape parameters shared by the convolutional blocks.
struct BlockConfig {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::vector<std::size_t> dilations{1};
  std::size_t stride = 1;

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("channels must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw std::invalid_argument("kernel must be a positive odd integer");
    if (dilations.empty()) throw std::invalid_argument("dilation list must be non-empty");
    for (auto d : dilations) {
      if (d == 0) throw std::invalid_argument("dilation rates must be positive");
    }
    if (stride == 0) throw std::invalid_argument("stride must be positive");
  }
};

template <typename T>
struct Conv3d {
  Tensor<T> weight;  // out x in x kl x kw x kh
  Tensor<T> bias;
  ConvGeometry geom;

  Conv3d() = default;
  Conv3d(const Scope<T>& scope, std::size_t in, std::size_t out, const Triple& kernel,
         const ConvGeometry& g, bool zero = false)
      : geom(g) {
    const std::size_t fan_in = in * kernel[0] * kernel[1] * kernel[2];
    const Shape shape{out, in, kernel[0], kernel[1], kernel[2]};
    weight = zero ? scope.constant("weight", shape, T(0)) : scope.weight("weight", shape, fan_in);
    bias = scope.constant("bias", {out}, T(0));
  }

  static Conv3d same(const Scope<T>& scope, std::size_t in, std::size_t out, std::size_t k,
                     bool zero = false) {
    const Triple kernel{k, k, k};
    return Conv3d(scope, in, out, kernel, ConvGeometry::same(kernel), zero);
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias, geom); }
  std::size_t weight_count() const { return weight.size(); }
};

/// Per-axis stride that halves every axis of extent >= 2. Odd extents above
/// one cannot halve cleanly.
inline Triple halving_stride(const Triple& extents) {
  Triple stride{1, 1, 1};
  bool any = false;
  for (int a = 0; a < 3; ++a) {
    if (extents[a] >= 2) {
      if (extents[a] % 2 != 0) {
        throw ShapeError("extent " + std::to_string(extents[a]) + " does not halve cleanly");
      }
      stride[a] = 2;
      any = true;
    }
  }
  if (!any) throw ShapeError("no spatial axis left to downsample");
  return stride;
}

inline Triple apply_stride(const Triple& extents, const Triple& stride) {
  return {extents[0] / stride[0], extents[1] / stride[1], extents[2] / stride[2]};
}

// ---------------------------------------------------------------------------
// Dimensional decomposition residual block.

/// Three axis-aligned 1-D convolutions (k along h, then w, then l) with a
/// shared dilation, LeakyReLU between them, plus a residual of the input
/// (1x1x1-projected when channel counts differ).
template <typename T>
class DdrBlock {
 public:
  DdrBlock() = default;
  DdrBlock(const Scope<T>& scope, const BlockConfig& cfg, std::size_t dilation, bool zero = false)
      : kernel_(cfg.kernel) {
    cfg.validate();
    const std::size_t k = cfg.kernel;
    const std::size_t d = dilation;
    conv_h_ = Conv3d<T>(scope.sub("conv_h"), cfg.in_channels, cfg.out_channels, {1, 1, k},
                        ConvGeometry::same({1, 1, k}, {1, 1, d}), zero);
    conv_w_ = Conv3d<T>(scope.sub("conv_w"), cfg.out_channels, cfg.out_channels, {1, k, 1},
                        ConvGeometry::same({1, k, 1}, {1, d, 1}), zero);
    conv_l_ = Conv3d<T>(scope.sub("conv_l"), cfg.out_channels, cfg.out_channels, {k, 1, 1},
                        ConvGeometry::same({k, 1, 1}, {d, 1, 1}), zero);
    if (cfg.in_channels != cfg.out_channels) {
      proj_ = Conv3d<T>(scope.sub("proj"), cfg.in_channels, cfg.out_channels, {1, 1, 1}, {});
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = leaky_relu(conv_h_(x), T(kLeakySlope));
    y = leaky_relu(conv_w_(y), T(kLeakySlope));
    y = conv_l_(y);
    Tensor<T> skip = proj_.weight.defined() ? proj_(x) : x;
    if (skip.shape() != y.shape()) {
      throw ShapeError("DDR residual shape " + shape_str(skip.shape()) + " vs " + shape_str(y.shape()));
    }
    return add(y, skip);
  }

  /// Weights of the decomposed stack (biases and projection excluded).
  std::size_t decomposed_weight_count() const {
    return conv_h_.weight_count() + conv_w_.weight_count() + conv_l_.weight_count();
  }
  /// Weights of a single full k x k x k kernel with the same channel counts.
  std::size_t full_kernel_weight_count() const {
    const auto& s = conv_h_.weight.shape();
    return s[0] * s[1] * kernel_ * kernel_ * kernel_;
  }

  const Conv3d<T>& conv_h() const { return conv_h_; }
  const Conv3d<T>& conv_w() const { return conv_w_; }
  const Conv3d<T>& conv_l() const { return conv_l_; }

 private:
  std::size_t kernel_ = 3;
  Conv3d<T> conv_h_, conv_w_, conv_l_, proj_;
};

inline const std::vector<std::size_t> kSemanticDilations{1, 2, 3};

/// Parallel DDR branches at dilations 1, 2, 3, summed.
template <typename T>
class SemanticBlock {
 public:
  SemanticBlock() = default;
  SemanticBlock(const Scope<T>& scope, std::size_t channels, std::size_t kernel = 3) {
    BlockConfig cfg{channels, channels, kernel, kSemanticDilations, 1};
    for (auto d : kSemanticDilations) {
      branches_.emplace_back(scope.sub("ddr" + std::to_string(d)), cfg, d);
    }
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> out;
    for (const auto& b : branches_) {
      Tensor<T> y = b(x);
      out = out.defined() ? add(out, y) : y;
    }
    return out;
  }
  const std::vector<DdrBlock<T>>& branches() const { return branches_; }

 private:
  std::vector<DdrBlock<T>> branches_;
};

// ---------------------------------------------------------------------------
// Multi-scale convolutional block.

struct ConvCost {
  std::size_t stacked;  // multiplies per output element, stacked 3x3x3 layers
  std::size_t full;     // same for one k x k x k kernel
};

inline std::size_t mscb_depth(std::size_t effective_kernel) {
  if (effective_kernel == 5) return 2;
  if (effective_kernel == 7) return 3;
  throw std::invalid_argument("unsupported effective kernel " + std::to_string(effective_kernel) +
                              " (expected 5 or 7)");
}

/// Per-output-voxel multiply count for C -> C channels.
inline ConvCost cost_report(std::size_t effective_kernel, std::size_t channels) {
  const std::size_t depth = mscb_depth(effective_kernel);
  const std::size_t c2 = channels * channels;
  return {depth * 27 * c2, effective_kernel * effective_kernel * effective_kernel * c2};
}

/// Stack of 3x3x3 same-padded convolutions emulating a 5^3 or 7^3 kernel.
template <typename T>
class Mscb {
 public:
  Mscb() = default;
  Mscb(const Scope<T>& scope, std::size_t in, std::size_t out, std::size_t effective_kernel = 5) {
    const std::size_t depth = mscb_depth(effective_kernel);
    for (std::size_t i = 0; i < depth; ++i) {
      convs_.push_back(Conv3d<T>::same(scope.sub("conv" + std::to_string(i)), i == 0 ? in : out, out, 3));
    }
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      y = convs_[i](y);
      if (i + 1 < convs_.size()) y = leaky_relu(y, T(kLeakySlope));
    }
    return y;
  }
  const std::vector<Conv3d<T>>& convs() const { return convs_; }

 private:
  std::vector<Conv3d<T>> convs_;
};

// ---------------------------------------------------------------------------
// Residual convolution blocks.

/// conv(stride) -> IN -> LeakyReLU -> conv -> IN -> conv -> IN, plus a bypass
/// around the whole main path, then LeakyReLU. The bypass is a strided 1x1x1
/// projection when the geometry or width changes, identity otherwise.
template <typename T>
class ResidualConvBlock {
 public:
  ResidualConvBlock() = default;
  ResidualConvBlock(const Scope<T>& scope, std::size_t in, std::size_t out, const Triple& stride,
                    bool zero_main = false) {
    const Triple k3{3, 3, 3};
    ConvGeometry first = ConvGeometry::same(k3);
    first.stride = stride;
    conv1_ = Conv3d<T>(scope.sub("conv1"), in, out, k3, first, zero_main);
    conv2_ = Conv3d<T>(scope.sub("conv2"), out, out, k3, ConvGeometry::same(k3), zero_main);
    conv3_ = Conv3d<T>(scope.sub("conv3"), out, out, k3, ConvGeometry::same(k3), zero_main);
    if (in != out || stride != Triple{1, 1, 1}) {
      ConvGeometry g;
      g.stride = stride;
      bypass_ = Conv3d<T>(scope.sub("bypass"), in, out, {1, 1, 1}, g);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    Tensor<T> y = leaky_relu(instance_norm(conv1_(x)), T(kLeakySlope));
    y = instance_norm(conv2_(y));
    y = instance_norm(conv3_(y));
    Tensor<T> skip = bypass_.weight.defined() ? bypass_(x) : x;
    return leaky_relu(add(y, skip), T(kLeakySlope));
  }

  const Conv3d<T>& bypass() const { return bypass_; }

 private:
  Conv3d<T> conv1_, conv2_, conv3_, bypass_;
};

template <typename T>
class DownsampleBlock {
 public:
  DownsampleBlock() = default;
  DownsampleBlock(const Scope<T>& scope, std::size_t in, std::size_t out,
                  const Triple& stride = {2, 2, 2}, bool zero_main = false)
      : body_(scope, in, out, stride, zero_main) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return body_(x); }
  const ResidualConvBlock<T>& body() const { return body_; }

 private:
  ResidualConvBlock<T> body_;
};

template <typename T>
class ConvResBlock {
 public:
  ConvResBlock() = default;
  ConvResBlock(const Scope<T>& scope, std::size_t channels, bool zero_main = false)
      : body_(scope, channels, channels, {1, 1, 1}, zero_main) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return body_(x); }

 private:
  ResidualConvBlock<T> body_;
};

/// Strided transposed convolution followed by the residual block topology.
template <typename T>
class UpsampleBlock {
 public:
  UpsampleBlock() = default;
  UpsampleBlock(const Scope<T>& scope, std::size_t in, std::size_t out,
                const Triple& stride = {2, 2, 2}, bool zero_main = false)
      : stride_(stride), body_(scope.sub("res"), out, out, {1, 1, 1}, zero_main) {
    const Scope<T> up = scope.sub("up");
    up_weight_ = up.weight("weight", {in, out, 3, 3, 3}, in * 27 / (stride[0] * stride[1] * stride[2]));
    up_bias_ = up.constant("bias", {out}, T(0));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    ConvGeometry g = ConvGeometry::same({3, 3, 3});
    g.stride = stride_;
    const Triple pad_out{stride_[0] - 1, stride_[1] - 1, stride_[2] - 1};
    return body_(conv_transpose3d(x, up_weight_, up_bias_, g, pad_out));
  }

 private:
  Triple stride_{2, 2, 2};
  Tensor<T> up_weight_, up_bias_;
  ResidualConvBlock<T> body_;
};

}  // namespace skimba

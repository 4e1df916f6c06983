#pragma once

#include <array>
#include <stdexcept>

#include "skimba/conv.hpp"
#include "skimba/ops.hpp"
#include "skimba/params.hpp"

namespace skimba {

// ---------------------------------------------------------------------------
// Discretization and the raw selective-scan primitive.

template <typename T>
struct Discretized {
  T a_bar;
  T b_bar;
};

/// Zero-order hold on the diagonal state matrix, Euler step on the input
/// matrix: a_bar = exp(delta a), b_bar = delta b.
template <typename T>
Discretized<T> discretize(T a, T b, T delta) {
  if (!(delta > T(0))) throw std::domain_error("discretize: step size must be positive");
  return {std::exp(delta * a), delta * b};
}

/// Selective scan over tokens. Shapes: u, delta S x E; a E x N (negative);
/// b, c S x N; d E. Token t continues the state of token t - stride, so a
/// stride of s runs s interleaved subsequences independently.
///
///   h_t = exp(delta_t a) h_{t-s} + delta_t b_t u_t,   y_t = c_t . h_t + d u_t
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d,
                         std::size_t stride) {
  if (u.rank() != 2) throw ShapeError("scan input must be S x E, got " + shape_str(u.shape()));
  const std::size_t S = u.extent(0), E = u.extent(1);
  if (a.rank() != 2 || a.extent(0) != E) {
    throw ShapeError("scan state matrix " + shape_str(a.shape()) + " does not match channels " +
                     std::to_string(E));
  }
  const std::size_t N = a.extent(1);
  if (delta.shape() != u.shape()) throw ShapeError("scan delta shape " + shape_str(delta.shape()));
  if (b.shape() != Shape{S, N} || c.shape() != Shape{S, N}) {
    throw ShapeError("scan B/C must be " + shape_str({S, N}) + ", got " + shape_str(b.shape()) +
                     " and " + shape_str(c.shape()));
  }
  if (d.size() != E) throw ShapeError("scan skip vector size " + std::to_string(d.size()));
  if (stride == 0) throw std::invalid_argument("scan stride must be positive");

  const T* pu = u.data().data();
  const T* pdt = delta.data().data();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const T* pc = c.data().data();
  const T* pd = d.data().data();
  for (std::size_t i = 0; i < S * E; ++i) {
    if (!(pdt[i] > T(0))) throw std::domain_error("scan: step size must be positive");
  }
  auto states = std::make_shared<std::vector<T>>(S * E * N);
  std::vector<T> out(S * E);
  T* h = states->data();
  for (std::size_t t = 0; t < S; ++t) {
    for (std::size_t e = 0; e < E; ++e) {
      const T dt = pdt[t * E + e];
      const T ut = pu[t * E + e];
      T acc = pd[e] * ut;
      T* ht = h + (t * E + e) * N;
      const T* hp = t >= stride ? h + ((t - stride) * E + e) * N : nullptr;
      for (std::size_t n = 0; n < N; ++n) {
        const T a_bar = std::exp(dt * pa[e * N + n]);
        const T prev = hp ? hp[n] : T(0);
        ht[n] = a_bar * prev + dt * pb[t * N + n] * ut;
        acc += pc[t * N + n] * ht[n];
      }
      out[t * E + e] = acc;
    }
  }
  return make_result<T>(
      Shape{S, E}, std::move(out), {u, delta, a, b, c, d},
      [u, delta, a, b, c, d, states, S, E, N, stride](std::span<const T> gy) {
        const T* pu = u.data().data();
        const T* pdt = delta.data().data();
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        const T* pc = c.data().data();
        const T* pd = d.data().data();
        const T* h = states->data();
        T* gu = grad_sink(u);
        T* gdt = grad_sink(delta);
        T* ga = grad_sink(a);
        T* gb = grad_sink(b);
        T* gc = grad_sink(c);
        T* gd = grad_sink(d);
        // Gradient flowing into each hidden state from later tokens.
        std::vector<T> carry(S * E * N, T(0));
        for (std::size_t t = S; t-- > 0;) {
          for (std::size_t e = 0; e < E; ++e) {
            const std::size_t te = t * E + e;
            const T dy = gy[te];
            const T ut = pu[te];
            const T dt = pdt[te];
            T du = dy * pd[e];
            T ddt = 0;
            if (gd) gd[e] += dy * ut;
            const T* ht = h + te * N;
            const T* hp = t >= stride ? h + ((t - stride) * E + e) * N : nullptr;
            T* cp = t >= stride ? carry.data() + ((t - stride) * E + e) * N : nullptr;
            const T* ct = carry.data() + te * N;
            for (std::size_t n = 0; n < N; ++n) {
              if (gc) gc[t * N + n] += dy * ht[n];
              const T gh = ct[n] + dy * pc[t * N + n];
              const T an = pa[e * N + n];
              const T a_bar = std::exp(dt * an);
              const T prev = hp ? hp[n] : T(0);
              if (cp) cp[n] += gh * a_bar;
              const T d_abar = gh * prev * a_bar;
              ddt += d_abar * an + gh * pb[t * N + n] * ut;
              if (ga) ga[e * N + n] += d_abar * dt;
              if (gb) gb[t * N + n] += gh * dt * ut;
              du += gh * dt * pb[t * N + n];
            }
            if (gu) gu[te] += du;
            if (gdt) gdt[te] += ddt;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Directional flattening of C x L x W x H volumes into S x C token sequences.

enum class Direction { forward, reverse, spatial };

inline const char* direction_name(Direction d) {
  switch (d) {
    case Direction::forward: return "forward";
    case Direction::reverse: return "reverse";
    case Direction::spatial: return "spatial";
  }
  return "?";
}

inline constexpr std::array<Direction, 3> kDirections{Direction::forward, Direction::reverse,
                                                      Direction::spatial};

template <typename T>
struct DirectionalSequence {
  Tensor<T> tokens;  // S x C
  Direction direction;
  Triple origin;     // (l, w, h) of the source volume
};

/// order[k] = forward (row-major l, w, h) voxel index of the k-th token.
/// The spatial direction walks h slowest, then l, then w.
inline std::vector<std::size_t> direction_order(const Triple& origin, Direction dir) {
  const std::size_t L = origin[0], W = origin[1], H = origin[2];
  std::vector<std::size_t> order;
  order.reserve(L * W * H);
  switch (dir) {
    case Direction::forward:
      for (std::size_t i = 0; i < L * W * H; ++i) order.push_back(i);
      break;
    case Direction::reverse:
      for (std::size_t i = L * W * H; i-- > 0;) order.push_back(i);
      break;
    case Direction::spatial:
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t w = 0; w < W; ++w) order.push_back((l * W + w) * H + h);
      break;
  }
  return order;
}

/// C x L x W x H -> S x C in forward order.
template <typename T>
Tensor<T> volume_to_tokens(const Tensor<T>& vol) {
  if (vol.rank() != 4) throw ShapeError("expected C x L x W x H, got " + shape_str(vol.shape()));
  const std::size_t C = vol.extent(0);
  const std::size_t S = vol.size() / C;
  return transpose(reshape(vol, Shape{C, S}));
}

template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& tokens, const Triple& origin) {
  const std::size_t S = origin[0] * origin[1] * origin[2];
  if (tokens.rank() != 2 || tokens.extent(0) != S) {
    throw ShapeError("token matrix " + shape_str(tokens.shape()) + " does not match origin");
  }
  const std::size_t C = tokens.extent(1);
  return reshape(transpose(tokens), Shape{C, origin[0], origin[1], origin[2]});
}

namespace detail {
inline std::shared_ptr<const std::vector<std::size_t>> row_gather_index(
    const std::vector<std::size_t>& rows, std::size_t channels) {
  auto index = std::make_shared<std::vector<std::size_t>>();
  index->reserve(rows.size() * channels);
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < channels; ++c) index->push_back(r * channels + c);
  return index;
}

inline std::vector<std::size_t> invert(const std::vector<std::size_t>& order) {
  std::vector<std::size_t> inv(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inv[order[k]] = k;
  return inv;
}
}  // namespace detail

/// Forward-ordered tokens -> tokens in `dir` order.
template <typename T>
Tensor<T> reorder_tokens(const Tensor<T>& forward_tokens, const Triple& origin, Direction dir) {
  if (dir == Direction::forward) return forward_tokens;
  const auto order = direction_order(origin, dir);
  return gather(forward_tokens, detail::row_gather_index(order, forward_tokens.extent(1)),
                forward_tokens.shape());
}

/// Inverse of reorder_tokens.
template <typename T>
Tensor<T> restore_tokens(const Tensor<T>& tokens, const Triple& origin, Direction dir) {
  if (dir == Direction::forward) return tokens;
  const auto inv = detail::invert(direction_order(origin, dir));
  return gather(tokens, detail::row_gather_index(inv, tokens.extent(1)), tokens.shape());
}

template <typename T>
DirectionalSequence<T> flatten_direction(const Tensor<T>& vol, Direction dir) {
  const Triple origin{vol.extent(1), vol.extent(2), vol.extent(3)};
  return {reorder_tokens(volume_to_tokens(vol), origin, dir), dir, origin};
}

template <typename T>
Tensor<T> unflatten_direction(const DirectionalSequence<T>& seq) {
  return tokens_to_volume(restore_tokens(seq.tokens, seq.origin, seq.direction), seq.origin);
}

// ---------------------------------------------------------------------------
// Scan parameters and dilated scans.

inline constexpr std::array<std::size_t, 3> kSkimbaDilations{0, 1, 3};

inline void check_dilation(std::size_t d) {
  if (d != 0 && d != 1 && d != 3) {
    throw std::invalid_argument("unsupported dilation " + std::to_string(d) +
                                " (expected 0, 1 or 3)");
  }
}

/// State-space parameters of one directional scan. The scan runs on `inner`
/// channels; in/out projections map to and from the block width.
template <typename T>
struct ScanParams {
  std::size_t state = 0;
  std::size_t inner = 0;
  std::size_t channels = 0;
  Tensor<T> a_log;    // inner x state; realized A = -exp(a_log)
  Tensor<T> delta_w;  // inner x inner
  Tensor<T> delta_b;  // inner
  Tensor<T> b_w;      // inner x state
  Tensor<T> c_w;      // inner x state
  Tensor<T> d_skip;   // inner
  Tensor<T> in_w, in_b;    // channels -> inner
  Tensor<T> out_w, out_b;  // inner -> channels

  static ScanParams create(const Scope<T>& scope, std::size_t channels, std::size_t inner,
                           std::size_t state, bool zero_out = false) {
    ScanParams p;
    p.state = state;
    p.inner = inner;
    p.channels = channels;
    std::vector<T> a_log(inner * state);
    for (std::size_t e = 0; e < inner; ++e)
      for (std::size_t n = 0; n < state; ++n)
        a_log[e * state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    p.a_log = scope.values("a_log", {inner, state}, std::move(a_log));
    p.delta_w = scope.weight("delta_w", {inner, inner}, inner, T(0.1));
    // Softplus-inverse of step sizes spread log-uniformly over [1e-3, 1e-1].
    std::vector<T> dt_bias(inner);
    for (auto& v : dt_bias) {
      const double dt = std::exp(uniform<double>(scope.rng(), std::log(1e-3), std::log(1e-1)));
      v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    p.delta_b = scope.values("delta_b", {inner}, std::move(dt_bias));
    p.b_w = scope.weight("b_w", {inner, state}, inner);
    p.c_w = scope.weight("c_w", {inner, state}, inner);
    p.d_skip = scope.constant("d_skip", {inner}, T(1));
    p.in_w = scope.weight("in_w", {channels, inner}, channels);
    p.in_b = scope.constant("in_b", {inner}, T(0));
    if (zero_out) {
      p.out_w = scope.constant("out_w", {inner, channels}, T(0));
    } else {
      p.out_w = scope.weight("out_w", {inner, channels}, inner, T(0.5));
    }
    p.out_b = scope.constant("out_b", {channels}, T(0));
    return p;
  }

  Tensor<T> realized_a() const { return neg(exp(a_log)); }
};

/// Scan over `x` (S x inner) with token-dependent step, input and readout
/// matrices, splitting the sequence into d + 1 interleaved subsequences.
template <typename T>
Tensor<T> dilated_scan(const ScanParams<T>& params, const Tensor<T>& x, std::size_t d) {
  check_dilation(d);
  if (x.rank() != 2 || x.extent(1) != params.inner) {
    throw ShapeError("scan tokens " + shape_str(x.shape()) + " do not match " +
                     std::to_string(params.inner) + " channels");
  }
  Tensor<T> delta = softplus(linear(x, params.delta_w, params.delta_b));
  Tensor<T> b = matmul(x, params.b_w);
  Tensor<T> c = matmul(x, params.c_w);
  return selective_scan(x, delta, params.realized_a(), b, c, params.d_skip, d + 1);
}

template <typename T>
Tensor<T> sequential_scan(const ScanParams<T>& params, const Tensor<T>& x) {
  return dilated_scan(params, x, 0);
}

/// One directional branch: reorder, project in, scan, project out, restore.
template <typename T>
Tensor<T> directional_branch(const ScanParams<T>& params, const Tensor<T>& forward_tokens,
                             const Triple& origin, Direction dir, std::size_t d) {
  Tensor<T> seq = reorder_tokens(forward_tokens, origin, dir);
  Tensor<T> inner = silu(linear(seq, params.in_w, params.in_b));
  Tensor<T> scanned = dilated_scan(params, inner, d);
  return restore_tokens(linear(scanned, params.out_w, params.out_b), origin, dir);
}

/// Skip triple scan layer: sum of forward, reverse and spatial branches at one
/// dilation, on forward-ordered tokens.
template <typename T>
struct StmLayer {
  std::size_t dilation = 0;
  std::array<ScanParams<T>, 3> branches;  // indexed like kDirections

  static StmLayer create(const Scope<T>& scope, std::size_t dilation, std::size_t channels,
                         std::size_t inner, std::size_t state, bool zero_out = false) {
    check_dilation(dilation);
    StmLayer layer;
    layer.dilation = dilation;
    for (std::size_t k = 0; k < 3; ++k) {
      layer.branches[k] = ScanParams<T>::create(scope.sub(direction_name(kDirections[k])),
                                                channels, inner, state, zero_out);
    }
    return layer;
  }

  Tensor<T> tokens(const Tensor<T>& forward_tokens, const Triple& origin) const {
    Tensor<T> total;
    for (std::size_t k = 0; k < 3; ++k) {
      Tensor<T> part = directional_branch(branches[k], forward_tokens, origin, kDirections[k], dilation);
      if (total.defined() && part.shape() != total.shape()) {
        throw ShapeError("directional outputs disagree: " + shape_str(part.shape()) + " vs " +
                         shape_str(total.shape()));
      }
      total = total.defined() ? add(total, part) : part;
    }
    return total;
  }

  Tensor<T> operator()(const Tensor<T>& volume) const {
    const Triple origin{volume.extent(1), volume.extent(2), volume.extent(3)};
    return tokens_to_volume(tokens(volume_to_tokens(volume), origin), origin);
  }
};

struct SkimbaConfig {
  std::size_t channels = 16;
  std::size_t state = 8;
  std::size_t inner = 0;       // 0: same as channels
  std::size_t mlp_ratio = 2;
  bool zero_residual_init = false;  // zero out-projections and MLP output layer
};

/// Pre-norm residual block summing STM layers at dilations 0, 1 and 3, then a
/// pre-norm residual MLP:
///   phi_in  = psi_all(LN(f)) + f
///   phi_all = MLP(LN(phi_in)) + phi_in
template <typename T>
class SkimbaBlock {
 public:
  SkimbaBlock() = default;
  SkimbaBlock(const Scope<T>& scope, const SkimbaConfig& cfg) : cfg_(cfg) {
    const std::size_t C = cfg.channels;
    const std::size_t inner = cfg.inner ? cfg.inner : C;
    ln1_gain_ = scope.constant("ln1/gain", {C}, T(1));
    ln1_bias_ = scope.constant("ln1/bias", {C}, T(0));
    for (std::size_t i = 0; i < kSkimbaDilations.size(); ++i) {
      layers_.push_back(StmLayer<T>::create(scope.sub("stm" + std::to_string(kSkimbaDilations[i])),
                                            kSkimbaDilations[i], C, inner, cfg.state,
                                            cfg.zero_residual_init));
    }
    ln2_gain_ = scope.constant("ln2/gain", {C}, T(1));
    ln2_bias_ = scope.constant("ln2/bias", {C}, T(0));
    const std::size_t hidden = C * cfg.mlp_ratio;
    mlp_w1_ = scope.weight("mlp/w1", {C, hidden}, C);
    mlp_b1_ = scope.constant("mlp/b1", {hidden}, T(0));
    mlp_w2_ = cfg.zero_residual_init ? scope.constant("mlp/w2", {hidden, C}, T(0))
                                     : scope.weight("mlp/w2", {hidden, C}, hidden, T(0.5));
    mlp_b2_ = scope.constant("mlp/b2", {C}, T(0));
  }

  std::vector<std::size_t> dilations() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers_) out.push_back(l.dilation);
    return out;
  }
  const std::vector<StmLayer<T>>& layers() const { return layers_; }

  Tensor<T> operator()(const Tensor<T>& f) const {
    if (f.rank() != 4 || f.extent(0) != cfg_.channels) {
      throw ShapeError("skimba block expects " + std::to_string(cfg_.channels) +
                       " channels, got " + shape_str(f.shape()));
    }
    const Triple origin{f.extent(1), f.extent(2), f.extent(3)};
    const std::size_t C = cfg_.channels;
    Tensor<T> x = volume_to_tokens(f);
    Tensor<T> normed = layer_norm(x, C, ln1_gain_, ln1_bias_);
    Tensor<T> psi_all;
    for (const auto& layer : layers_) {
      Tensor<T> psi = layer.tokens(normed, origin);
      psi_all = psi_all.defined() ? add(psi_all, psi) : psi;
    }
    Tensor<T> phi_in = add(psi_all, x);
    Tensor<T> hidden = silu(linear(layer_norm(phi_in, C, ln2_gain_, ln2_bias_), mlp_w1_, mlp_b1_));
    Tensor<T> phi_all = add(linear(hidden, mlp_w2_, mlp_b2_), phi_in);
    return tokens_to_volume(phi_all, origin);
  }

 private:
  SkimbaConfig cfg_;
  Tensor<T> ln1_gain_, ln1_bias_, ln2_gain_, ln2_bias_;
  std::vector<StmLayer<T>> layers_;
  Tensor<T> mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

}  // namespace skimba

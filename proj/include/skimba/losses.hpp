#pragma once

#include <cstdint>
#include <numeric>
#include <optional>

#include "skimba/ops.hpp"

namespace skimba {

using Label = std::uint8_t;

namespace detail {
inline void check_labels(std::span<const Label> labels, std::size_t voxels, std::size_t classes) {
  if (labels.size() != voxels) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match " +
                     std::to_string(voxels) + " voxels");
  }
  for (Label l : labels) {
    if (l >= classes) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}
}  // namespace detail

/// Mean negative log-softmax of the true class. Logits are C x (voxels...).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Label> labels) {
  const std::size_t C = logits.extent(0);
  const std::size_t V = logits.size() / C;
  detail::check_labels(labels, V, C);
  auto probs = std::make_shared<std::vector<T>>(logits.size());
  T total = 0;
  const T* x = logits.data().data();
  for (std::size_t v = 0; v < V; ++v) {
    T mx = x[v];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c * V + v]);
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T e = std::exp(x[c * V + v] - mx);
      (*probs)[c * V + v] = e;
      z += e;
    }
    for (std::size_t c = 0; c < C; ++c) (*probs)[c * V + v] /= z;
    total += std::log(z) + mx - x[labels[v] * V + v];
  }
  std::vector<Label> lab(labels.begin(), labels.end());
  return make_result<T>(Shape{1}, {total / static_cast<T>(V)}, {logits},
                        [logits, probs, lab = std::move(lab), C, V](std::span<const T> g) {
                          T* gx = grad_sink(logits);
                          const T scale = g[0] / static_cast<T>(V);
                          for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t v = 0; v < V; ++v) {
                              const T target = lab[v] == c ? T(1) : T(0);
                              gx[c * V + v] += scale * ((*probs)[c * V + v] - target);
                            }
                        });
}

/// Gradient of the Lovasz extension of the Jaccard loss for a foreground
/// indicator sorted by decreasing error.
template <typename T>
std::vector<T> lovasz_grad(const std::vector<T>& fg_sorted) {
  const std::size_t n = fg_sorted.size();
  const T gts = std::accumulate(fg_sorted.begin(), fg_sorted.end(), T(0));
  std::vector<T> jaccard(n);
  T cum_fg = 0, cum_bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cum_fg += fg_sorted[i];
    cum_bg += T(1) - fg_sorted[i];
    const T inter = gts - cum_fg;
    const T uni = gts + cum_bg;
    jaccard[i] = T(1) - inter / uni;
  }
  for (std::size_t i = n; i-- > 1;) jaccard[i] -= jaccard[i - 1];
  return jaccard;
}

namespace detail {
template <typename T>
struct LovaszClassTerm {
  std::size_t cls;
  T value;
  std::vector<std::size_t> order;  // voxel indices by decreasing error
  std::vector<T> grad;             // Jaccard-extension weights along `order`
};

template <typename T>
std::vector<LovaszClassTerm<T>> lovasz_terms(std::span<const T> probs, std::size_t C,
                                             std::span<const Label> labels) {
  const std::size_t V = labels.size();
  std::vector<LovaszClassTerm<T>> terms;
  for (std::size_t c = 0; c < C; ++c) {
    bool present = false;
    for (Label l : labels) present = present || l == c;
    if (!present) continue;
    std::vector<T> errors(V);
    for (std::size_t v = 0; v < V; ++v) {
      const T fg = labels[v] == c ? T(1) : T(0);
      errors[v] = std::abs(fg - probs[c * V + v]);
    }
    LovaszClassTerm<T> term{c, T(0), std::vector<std::size_t>(V), {}};
    std::iota(term.order.begin(), term.order.end(), std::size_t{0});
    std::stable_sort(term.order.begin(), term.order.end(),
                     [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
    std::vector<T> fg_sorted(V);
    for (std::size_t i = 0; i < V; ++i) fg_sorted[i] = labels[term.order[i]] == c ? T(1) : T(0);
    term.grad = lovasz_grad(fg_sorted);
    for (std::size_t i = 0; i < V; ++i) term.value += errors[term.order[i]] * term.grad[i];
    terms.push_back(std::move(term));
  }
  return terms;
}
}  // namespace detail

/// Per-class Lovasz-softmax values for classes present in the labels.
template <typename T>
std::vector<std::pair<std::size_t, T>> lovasz_per_class(const Tensor<T>& probs,
                                                        std::span<const Label> labels) {
  const std::size_t C = probs.extent(0);
  detail::check_labels(labels, probs.size() / C, C);
  std::vector<std::pair<std::size_t, T>> out;
  for (const auto& t : detail::lovasz_terms<T>(probs.data(), C, labels)) out.emplace_back(t.cls, t.value);
  return out;
}

/// Lovasz-softmax over one scene: mean over ground-truth-present classes of the
/// Lovasz extension applied to |fg - p|. Zero when no class is present.
template <typename T>
Tensor<T> lovasz_softmax(const Tensor<T>& probs, std::span<const Label> labels) {
  const std::size_t C = probs.extent(0);
  const std::size_t V = probs.size() / C;
  detail::check_labels(labels, V, C);
  auto terms = std::make_shared<std::vector<detail::LovaszClassTerm<T>>>(
      detail::lovasz_terms<T>(probs.data(), C, labels));
  T value = 0;
  for (const auto& t : *terms) value += t.value;
  if (!terms->empty()) value /= static_cast<T>(terms->size());
  std::vector<Label> lab(labels.begin(), labels.end());
  return make_result<T>(Shape{1}, {value}, {probs},
                        [probs, terms, lab = std::move(lab), V](std::span<const T> g) {
                          if (terms->empty()) return;
                          T* gp = grad_sink(probs);
                          const T scale = g[0] / static_cast<T>(terms->size());
                          for (const auto& t : *terms) {
                            for (std::size_t i = 0; i < V; ++i) {
                              const std::size_t v = t.order[i];
                              const bool fg = lab[v] == t.cls;
                              // d|fg - p| / dp
                              gp[t.cls * V + v] += scale * t.grad[i] * (fg ? T(-1) : T(1));
                            }
                          }
                        });
}

/// L_CE + beta * L_Lovasz on softmax probabilities.
template <typename T>
Tensor<T> combined_seg_loss(const Tensor<T>& logits, std::span<const Label> labels, T beta = T(1)) {
  Tensor<T> ce = cross_entropy(logits, labels);
  if (beta == T(0)) return ce;
  return add(ce, mul_scalar(lovasz_softmax(softmax(logits, 0), labels), beta));
}

/// 0.5 * sum(exp(log_var) + mean^2 - 1 - log_var).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& mean, const Tensor<T>& log_var) {
  Tensor<T> terms = sub(add(exp(log_var), square(mean)), add_scalar(log_var, T(1)));
  return mul_scalar(sum(terms), T(0.5));
}

// ---------------------------------------------------------------------------
// Metrics.

struct ConfusionCounts {
  std::vector<std::uint64_t> tp, fp, fn;

  explicit ConfusionCounts(std::size_t classes = 0) : tp(classes), fp(classes), fn(classes) {}
  std::size_t classes() const { return tp.size(); }

  void accumulate(std::span<const Label> pred, std::span<const Label> truth) {
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth sizes differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] >= classes() || truth[i] >= classes()) throw std::out_of_range("label out of range");
      if (pred[i] == truth[i]) {
        ++tp[pred[i]];
      } else {
        ++fp[pred[i]];
        ++fn[truth[i]];
      }
    }
  }
  void merge(const ConfusionCounts& other) {
    for (std::size_t c = 0; c < classes(); ++c) {
      tp[c] += other.tp[c];
      fp[c] += other.fp[c];
      fn[c] += other.fn[c];
    }
  }
  bool present(std::size_t c) const { return tp[c] + fn[c] > 0; }
  std::optional<double> iou(std::size_t c) const {
    const std::uint64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp[c]) / static_cast<double>(denom);
  }
  /// Mean IoU over semantic classes 1..C-1 present in the ground truth.
  double miou() const {
    double total = 0;
    std::size_t n = 0;
    bool predicted = false;
    for (std::size_t c = 1; c < classes(); ++c) {
      predicted = predicted || fp[c] > 0;
      if (!present(c)) continue;
      total += *iou(c);
      ++n;
    }
    if (n == 0) return predicted ? 0.0 : 1.0;
    return total / static_cast<double>(n);
  }
};

/// Occupancy counts: index 0 empty, index 1 occupied.
inline ConfusionCounts occupancy_counts(std::span<const Label> pred, std::span<const Label> truth) {
  if (pred.size() != truth.size()) throw ShapeError("prediction and truth sizes differ");
  ConfusionCounts counts(2);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Label p = pred[i] != 0, t = truth[i] != 0;
    if (p == t) {
      ++counts.tp[p];
    } else {
      ++counts.fp[p];
      ++counts.fn[t];
    }
  }
  return counts;
}

/// IoU of the occupied class; 1 when both grids are entirely empty.
inline double completion_iou(const ConfusionCounts& occupancy) {
  return occupancy.iou(1).value_or(1.0);
}

inline double completion_iou(std::span<const Label> pred, std::span<const Label> truth) {
  return completion_iou(occupancy_counts(pred, truth));
}

inline double semantic_miou(std::span<const Label> pred, std::span<const Label> truth,
                            std::size_t classes) {
  ConfusionCounts counts(classes);
  counts.accumulate(pred, truth);
  return counts.miou();
}

}  // namespace skimba

#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "skimba/params.hpp"

namespace skimba::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(uniform<double>(rng, -scale, scale));
  return Tensor<T>(shape, std::move(v), requires_grad);
}

/// Jitters every parameter so that zero-initialised paths carry gradient too.
template <typename T>
void perturb_params(ParamStore<T>& store, Rng& rng, double scale = 0.1) {
  for (auto& p : store.params()) {
    for (auto& v : p.tensor.mutable_data()) v += static_cast<T>(uniform<double>(rng, -scale, scale));
  }
}

struct GradReport {
  double max_err = 0;  // |a - n| / max(|a|, |n|, floor)
  std::size_t checked = 0;
  std::string worst;
};

struct Leaf {
  std::string name;
  Tensor<double> tensor;
};

template <typename T>
std::vector<Leaf> leaves_of(ParamStore<T>& store) {
  std::vector<Leaf> out;
  for (auto& p : store.params()) out.push_back({p.name, p.tensor});
  return out;
}

/// Extrapolated central differences of sum(w * f()) for a fixed random w against the
/// reverse-mode gradient, on up to `per_leaf` random entries of each leaf.
inline GradReport check_gradients(const std::vector<Leaf>& leaves, const std::function<Tensor<double>()>& f,
                                  std::size_t per_leaf = 6, std::uint64_t seed = 7, double h = 1e-5,
                                  double floor = 1e-4) {
  Rng rng(seed);
  for (const auto& l : leaves) l.tensor.node()->grad.clear();
  Tensor<double> out = f();
  std::vector<double> w(out.size());
  for (auto& x : w) x = uniform<double>(rng, -1.0, 1.0);
  auto project = [&w](const Tensor<double>& y) {
    double s = 0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * y[i];
    return s;
  };
  sum(mul(out, Tensor<double>(out.shape(), w))).backward();

  GradReport r;
  for (const auto& l : leaves) {
    Tensor<double> t = l.tensor;
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.size(), 0.0);
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > per_leaf) {
      for (std::size_t i = 0; i < per_leaf; ++i) std::swap(idx[i], idx[uniform_index(rng, i, idx.size() - 1)]);
      idx.resize(per_leaf);
    }
    for (std::size_t i : idx) {
      auto data = t.mutable_data();
      const double orig = data[i];
      auto central = [&](double step) {
        NoGradGuard g;
        data[i] = orig + step;
        const double plus = project(f());
        data[i] = orig - step;
        const double minus = project(f());
        data[i] = orig;
        return (plus - minus) / (2 * step);
      };
      double step = h, coarse = central(h), fine = central(h / 2);
      // A leaky-relu switching inside [x - h, x + h] makes the two differences
      // disagree far beyond the O(h^2) gap of a smooth function; shrink the step.
      for (int k = 0; k < 2 && std::abs(coarse - fine) > 1e-3 * std::max({std::abs(coarse), std::abs(fine), floor});
           ++k) {
        step /= 10;
        coarse = central(step);
        fine = central(step / 2);
      }
      // Richardson extrapolation cancels the h^2 term of the central difference.
      const double numeric = (4 * fine - coarse) / 3;
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      ++r.checked;
      if (err > r.max_err) {
        r.max_err = err;
        r.worst = l.name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic[i]) + " numeric " +
                  std::to_string(numeric);
      }
    }
    t.node()->grad.clear();
  }
  return r;
}

}  // namespace skimba::testing

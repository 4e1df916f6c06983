#pragma once

#include <functional>

#include "skimba/blocks.hpp"

namespace skimba {

inline constexpr std::size_t kDefaultDiffusionSteps = 100;

/// Linear beta schedule. Endpoints are quoted for a 1000-step reference chain
/// and scaled by 1000 / steps so shorter chains still end near pure noise.
struct NoiseSchedule {
  std::size_t steps = 0;
  std::vector<double> betas;       // index t - 1
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  static NoiseSchedule linear(std::size_t steps = kDefaultDiffusionSteps, double beta_start = 1e-4,
                              double beta_end = 0.02, std::size_t reference_steps = 1000) {
    if (steps == 0) throw std::invalid_argument("diffusion needs at least one step");
    const double scale = static_cast<double>(reference_steps) / static_cast<double>(steps);
    NoiseSchedule s;
    s.steps = steps;
    double prod = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
      const double beta = std::min(scale * (beta_start + frac * (beta_end - beta_start)), 0.999);
      s.betas.push_back(beta);
      s.alphas.push_back(1.0 - beta);
      prod *= 1.0 - beta;
      s.alpha_bars.push_back(prod);
    }
    return s;
  }

  void check_step(std::size_t t) const {
    if (t < 1 || t > steps) {
      throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " +
                              std::to_string(steps) + "]");
    }
  }
  double beta(std::size_t t) const { check_step(t); return betas[t - 1]; }
  double alpha(std::size_t t) const { check_step(t); return alphas[t - 1]; }
  /// alpha_bar(0) = 1.
  double alpha_bar(std::size_t t) const {
    if (t == 0) return 1.0;
    check_step(t);
    return alpha_bars[t - 1];
  }
};

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename T>
Tensor<T> forward_diffuse(const NoiseSchedule& schedule, const Tensor<T>& x0, std::size_t t,
                          const Tensor<T>& noise) {
  schedule.check_step(t);
  if (noise.shape() != x0.shape()) {
    throw ShapeError("noise " + shape_str(noise.shape()) + " does not match " + shape_str(x0.shape()));
  }
  const double ab = schedule.alpha_bar(t);
  return add(mul_scalar(x0, static_cast<T>(std::sqrt(ab))), mul_scalar(noise, static_cast<T>(std::sqrt(1.0 - ab))));
}

template <typename T>
Tensor<T> gaussian_like(const Shape& shape, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = standard_normal<T>(rng);
  return Tensor<T>(shape, std::move(v));
}

/// Sinusoidal embedding of an integer step: [sin(t w_i), cos(t w_i)],
/// w_i = 10000^(-i / (dim / 2)).
template <typename T>
std::vector<T> timestep_embedding(std::size_t t, std::size_t dim) {
  std::vector<T> out(dim, T(0));
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::sin(static_cast<double>(t) * freq));
    out[half + i] = static_cast<T>(std::cos(static_cast<double>(t) * freq));
  }
  return out;
}

/// eps_theta(x_t, t, condition).
template <typename T>
using EpsilonModel = std::function<Tensor<T>(const Tensor<T>&, std::size_t, const Tensor<T>&)>;

/// One Monte-Carlo draw of the equally weighted denoising objective: t uniform
/// in [1, T], eps standard normal, mean squared error of the predicted noise.
template <typename T>
Tensor<T> denoise_loss(const EpsilonModel<T>& model, const NoiseSchedule& schedule, const Tensor<T>& x0,
                       const Tensor<T>& condition, Rng& rng) {
  const std::size_t t = uniform_index(rng, 1, schedule.steps);
  Tensor<T> eps = gaussian_like<T>(x0.shape(), rng);
  Tensor<T> x_t = forward_diffuse(schedule, x0, t, eps);
  return mse(eps, model(x_t, t, condition));
}

struct SampleStats {
  std::size_t evaluations = 0;
};

/// Ancestral sampling from x_T ~ N(0, I):
///   x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_theta) / sqrt(alpha_t) + sqrt(beta_t) eta
/// with eta = 0 on the final step.
template <typename T>
Tensor<T> sample(const EpsilonModel<T>& model, const NoiseSchedule& schedule, const Shape& latent_shape,
                 const Tensor<T>& condition, Rng& rng, SampleStats* stats = nullptr) {
  NoGradGuard no_grad;
  Tensor<T> x = gaussian_like<T>(latent_shape, rng);
  for (std::size_t t = schedule.steps; t >= 1; --t) {
    Tensor<T> eps = model(x, t, condition);
    if (stats) ++stats->evaluations;
    if (eps.shape() != x.shape()) throw ShapeError("denoiser output " + shape_str(eps.shape()));
    const double beta = schedule.beta(t);
    const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(t));
    const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
    std::vector<T> next(x.size());
    for (std::size_t i = 0; i < next.size(); ++i) {
      double v = inv_sqrt_alpha * (static_cast<double>(x[i]) - coef * static_cast<double>(eps[i]));
      if (t > 1) v += sigma * standard_normal<double>(rng);
      next[i] = static_cast<T>(v);
    }
    x = Tensor<T>(latent_shape, std::move(next));
  }
  return x;
}

/// Noise predictor that knows the single clean sample x0; used as an oracle.
template <typename T>
EpsilonModel<T> memorized_oracle(const NoiseSchedule& schedule, Tensor<T> x0) {
  return [schedule, x0](const Tensor<T>& x_t, std::size_t t, const Tensor<T>&) {
    const double ab = schedule.alpha_bar(t);
    std::vector<T> eps(x_t.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
      eps[i] = static_cast<T>((static_cast<double>(x_t[i]) - std::sqrt(ab) * static_cast<double>(x0[i])) /
                              std::sqrt(1.0 - ab));
    }
    return Tensor<T>(x_t.shape(), std::move(eps));
  };
}

/// Concatenates the noisy latent with the condition, adds a linearly mapped
/// timestep embedding per channel, then applies an effective-5 MSCB (or a
/// single 3x3x3 convolution when the MSCB is ablated).
template <typename T>
class MscbFuse {
 public:
  MscbFuse() = default;
  MscbFuse(const Scope<T>& scope, std::size_t latent_channels, std::size_t condition_channels,
           std::size_t out_channels, bool use_mscb, std::size_t embed_dim = 32)
      : embed_dim_(embed_dim), in_channels_(latent_channels + condition_channels),
        latent_channels_(latent_channels) {
    time_w_ = scope.weight("time/weight", {embed_dim, in_channels_}, embed_dim);
    time_b_ = scope.constant("time/bias", {in_channels_}, T(0));
    if (use_mscb) {
      mscb_ = Mscb<T>(scope.sub("mscb"), in_channels_, out_channels, 5);
    } else {
      plain_ = Conv3d<T>::same(scope.sub("plain"), in_channels_, out_channels, 3);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x_t, const Tensor<T>& condition, std::size_t t) const {
    if (x_t.extent(0) != latent_channels_) throw ShapeError("noisy latent channel count");
    Tensor<T> in = x_t;
    if (condition.defined()) {
      for (std::size_t a = 1; a < 4; ++a) {
        if (condition.extent(a) != x_t.extent(a)) {
          throw ShapeError("condition " + shape_str(condition.shape()) + " does not match latent " +
                           shape_str(x_t.shape()));
        }
      }
      in = concat<T>({x_t, condition}, 0);
    }
    if (in.extent(0) != in_channels_) throw ShapeError("fuse input has " + std::to_string(in.extent(0)) + " channels");
    Tensor<T> emb(Shape{1, embed_dim_}, timestep_embedding<T>(t, embed_dim_));
    Tensor<T> shift = reshape(linear(emb, time_w_, time_b_), Shape{in_channels_, 1, 1, 1});
    in = add(in, shift);
    return mscb_.convs().empty() ? plain_(in) : mscb_(in);
  }

 private:
  std::size_t embed_dim_ = 32;
  std::size_t in_channels_ = 0;
  std::size_t latent_channels_ = 0;
  Tensor<T> time_w_, time_b_;
  Mscb<T> mscb_;
  Conv3d<T> plain_;
};

}  // namespace skimba

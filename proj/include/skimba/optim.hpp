#pragma once

#include <numbers>

#include "skimba/params.hpp"

namespace skimba {

/// Linear warmup over the first `warmup_fraction` of steps, then cosine decay
/// from the peak to `floor_fraction` of the peak at the last step.
struct WarmupCosine {
  double peak = 1e-3;
  std::size_t total_steps = 1;
  double warmup_fraction = 0.05;
  double floor_fraction = 0.01;

  std::size_t warmup_steps() const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps))));
  }

  double operator()(std::size_t step) const {
    const std::size_t warm = warmup_steps();
    if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
    const std::size_t span = total_steps > warm ? total_steps - warm : 1;
    const double progress = std::min(1.0, static_cast<double>(step - warm + 1) / static_cast<double>(span));
    const double floor = floor_fraction * peak;
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
};

/// Decoupled weight decay Adam over the trainable tensors of a store. Decay
/// applies to rank >= 2 tensors only.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, AdamWConfig cfg) : store_(&store), cfg_(cfg) {
    for (const auto& p : store.params()) {
      if (!p.tensor.requires_grad()) continue;
      slots_.push_back({p.name, p.tensor, std::vector<T>(p.tensor.size(), T(0)), std::vector<T>(p.tensor.size(), T(0))});
    }
  }

  std::size_t steps_taken() const { return step_; }

  /// Global gradient norm before clipping.
  double grad_norm() const {
    double sq = 0;
    for (const auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      for (T g : s.param.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(sq);
  }

  void step(double lr) {
    ++step_;
    double scale = 1.0;
    if (cfg_.grad_clip > 0) {
      const double norm = grad_norm();
      if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& s : slots_) {
      if (!s.param.has_grad()) continue;
      auto grad = s.param.grad();
      auto w = s.param.mutable_data();
      const bool decay = s.param.rank() >= 2 && cfg_.weight_decay > 0;
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * scale;
        const double m = cfg_.beta1 * static_cast<double>(s.m[i]) + (1 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(s.v[i]) + (1 - cfg_.beta2) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        double x = static_cast<double>(w[i]);
        if (decay) x -= lr * cfg_.weight_decay * x;
        x -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        w[i] = static_cast<T>(x);
      }
    }
  }

  /// Moment buffers as checkpoint entries named "<prefix>m/<param>" and
  /// "<prefix>v/<param>".
  std::vector<CheckpointEntry> state_entries(const std::string& prefix = "optim/") const {
    std::vector<CheckpointEntry> out;
    for (const auto& s : slots_) {
      out.push_back({prefix + "m/" + s.name, s.param.shape(), std::vector<float>(s.m.begin(), s.m.end())});
      out.push_back({prefix + "v/" + s.name, s.param.shape(), std::vector<float>(s.v.begin(), s.v.end())});
    }
    return out;
  }

  void load_state(const std::vector<CheckpointEntry>& entries, std::size_t step,
                  const std::string& prefix = "optim/") {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (auto& s : slots_) {
      for (auto* buf : {&s.m, &s.v}) {
        const std::string key = prefix + (buf == &s.m ? "m/" : "v/") + s.name;
        auto it = by_name.find(key);
        if (it == by_name.end()) throw FormatError("optimizer state missing " + key);
        if (it->second->shape != s.param.shape()) throw FormatError("optimizer state shape mismatch for " + key);
        buf->assign(it->second->values.begin(), it->second->values.end());
      }
    }
    step_ = step;
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
  };
  ParamStore<T>* store_;
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t step_ = 0;
};

}  // namespace skimba

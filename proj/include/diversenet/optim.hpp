// SPDX-License-Identifier: Apache-2.0
//
// Mini-batch SGD with momentum and weight decay under a polynomial learning
// rate schedule.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/nn.hpp"
#include "diversenet/tensor.hpp"

namespace diversenet {

struct OptimState {
  double base_lr = 0.01;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t iter = 0;
  std::int64_t max_iter = 1;
};

/// base_lr * (1 - iter/max_iter)^power; strictly decreasing for power > 0.
inline double poly_lr(const OptimState& state) {
  if (state.max_iter <= 0) throw ConfigError("poly_lr: max_iter must be positive");
  if (state.iter < 0 || state.iter > state.max_iter)
    throw ConfigError("poly_lr: iter out of [0, max_iter]");
  const double frac = 1.0 - static_cast<double>(state.iter) / static_cast<double>(state.max_iter);
  return state.base_lr * std::pow(frac, state.power);
}

/// SGD over a fixed parameter list. Momentum buffers are keyed by position,
/// so the list must be identical (same tensors, same order) across steps.
/// A skip flag excludes a parameter from the update without touching its
/// momentum, which is how frozen heads sit out an iteration.
template <typename T>
class SgdOptimizer {
public:
  SgdOptimizer() = default;
  SgdOptimizer(std::vector<ParamRef<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.reserve(params_.size());
    for (auto& p : params_) velocity_.emplace_back(p.value->dims(), T{0});
  }

  std::size_t param_slots() const { return params_.size(); }

  void step(double lr, const std::vector<bool>* skip = nullptr) {
    if (skip && skip->size() != params_.size())
      throw ArgError("SgdOptimizer::step: skip mask size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (skip && (*skip)[i]) continue;
      Tensor<T>& value = *params_[i].value;
      Tensor<T>& grad = *params_[i].grad;
      Tensor<T>& vel = velocity_[i];
      const std::int64_t n = value.numel();
      T* v = value.data();
      const T* g = grad.data();
      T* m = vel.data();
      const T mu = static_cast<T>(momentum_);
      const T wd = static_cast<T>(weight_decay_);
      const T eta = static_cast<T>(lr);
      for (std::int64_t k = 0; k < n; ++k) {
        const T step_grad = g[k] + wd * v[k];
        m[k] = mu * m[k] + step_grad;
        v[k] -= eta * m[k];
      }
    }
  }

  std::vector<Tensor<T>>& velocity() { return velocity_; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }

private:
  std::vector<ParamRef<T>> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_ = 0.9;
  double weight_decay_ = 1e-4;
};

}  // namespace diversenet

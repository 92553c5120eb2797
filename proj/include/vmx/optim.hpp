#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "vmx/errors.hpp"
#include "vmx/tensor.hpp"

namespace vmx {

inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double base_lr) {
  if (total_steps == 0 || step >= total_steps) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One AdamW update over parallel params/grads. Decay is decoupled: the weight
// shrink uses lr * wd and is applied before the moment-based step.
inline void adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads, AdamWState& state,
                       double lr, const AdamWOptions& opt) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw_step: optimizer state does not match parameters");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].data_mut();
    const auto& g = grads[i];
    if (g.size() != theta.size() || state.m[i].size() != theta.size()) {
      throw DimensionError("adamw_step: parameter " + std::to_string(i) + " has " + std::to_string(theta.size()) +
                           " values but gradient has " + std::to_string(g.size()));
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
      theta[k] -= lr * opt.weight_decay * theta[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      theta[k] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

// Convenience overload reading gradients from the tensors; missing grads count as zero.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, double lr, const AdamWOptions& opt) {
  std::vector<std::vector<double>> grads(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) {
      const auto g = params[i].grad();
      grads[i].assign(g.begin(), g.end());
    } else {
      grads[i].assign(params[i].numel(), 0.0);
    }
  }
  adamw_step(params, grads, state, lr, opt);
}

}  // namespace vmx

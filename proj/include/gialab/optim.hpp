#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "gialab/tensor.hpp"

namespace gialab {

/// Per-parameter first and second moments for Adam.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  explicit AdamState(std::span<const Tensor> params) { reset(params); }

  void reset(std::span<const Tensor> params) {
    step = 0;
    m.clear();
    v.clear();
    for (const Tensor& p : params) {
      m.push_back(Tensor::zeros_like(p));
      v.push_back(Tensor::zeros_like(p));
    }
  }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, std::span<Tensor> params, std::span<const Tensor> grads, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be positive");
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m.size()) + " moment slots");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() || params[k].shape() != state.m[k].shape()) {
      throw ShapeError("adam_step: parameter " + std::to_string(k) + " shape " + shape_str(params[k].shape()) +
                       " vs gradient " + shape_str(grads[k].shape()));
    }
  }
  ++state.step;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

inline void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].size(); ++i) params[k][i] -= lr * grads[k][i];
  }
}

/// Step decay at fixed fractions of the run: lr * factor^(milestones passed).
inline double milestone_lr(double base, std::size_t iter, std::size_t total, std::span<const double> milestones,
                           double factor) {
  double lr = base;
  for (double m : milestones) {
    if (static_cast<double>(iter) >= m * static_cast<double>(total)) lr *= factor;
  }
  return lr;
}

}  // namespace gialab

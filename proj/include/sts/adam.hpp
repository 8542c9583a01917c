#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "sts/tensor.hpp"

namespace sts::ad {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one set of parameters. `m` and `v` are allocated on
/// the first step to match the parameter shapes.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
};

/// One bias-corrected Adam update, applied in place to `params`.
template <typename T>
void adam_step(std::span<BasicTensor<T>* const> params,
               std::span<const BasicTensor<T>* const> grads, AdamState<T>& state) {
  if (params.size() != grads.size()) {
    throw Error("shape", "adam_step: " + std::to_string(params.size()) + " parameters but " +
                             std::to_string(grads.size()) + " gradients");
  }
  if (state.step < 0) throw Error("state", "adam_step: negative step counter");
  if (state.m.empty()) {
    for (const BasicTensor<T>* p : params) {
      state.m.emplace_back(p->shape(), T{0});
      state.v.emplace_back(p->shape(), T{0});
    }
  }
  if (state.m.size() != params.size()) {
    throw Error("shape", "adam_step: state tracks " + std::to_string(state.m.size()) +
                             " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.m[i].shape()) {
      throw Error("shape", "adam_step: parameter " + std::to_string(i) + " has shape " +
                               shape_string(params[i]->shape()) + ", gradient " +
                               shape_string(grads[i]->shape()) + ", moments " +
                               shape_string(state.m[i].shape()));
    }
  }

  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(c.beta1, t));
  const T corr2 = static_cast<T>(1.0 - std::pow(c.beta2, t));
  const T lr = static_cast<T>(c.lr), eps = static_cast<T>(c.epsilon);

  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->raw();
    const T* g = grads[i]->raw();
    T* m = state.m[i].raw();
    T* v = state.v[i].raw();
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      const T m_hat = m[k] / corr1;
      const T v_hat = v[k] / corr2;
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace sts::ad

#pragma once

// AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "msv/tensor.hpp"

namespace msv {

template <class T>
struct AdamWParams {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(1e-2);
};

template <class T>
struct AdamWState {
  std::size_t step = 0;
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
};

// One optimizer step over every parameter that has a gradient. Decoupled
// decay p <- p*(1 - lr*wd) is applied before the Adam update.
template <class T>
void adamw_step(std::map<std::string, Tensor<T>>& params,
                const std::map<std::string, Tensor<T>>& grads, AdamWState<T>& state,
                const AdamWParams<T>& hp) {
  state.step += 1;
  const T bc1 = T(1) - std::pow(hp.beta1, static_cast<T>(state.step));
  const T bc2 = T(1) - std::pow(hp.beta2, static_cast<T>(state.step));

  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor<T>& g = git->second;
    if (!p.same_shape(g))
      throw std::invalid_argument("adamw: gradient shape mismatch for '" + name + "'");

    auto [mit, m_new] = state.first_moment.try_emplace(name, Tensor<T>(p.shape()));
    auto [vit, v_new] = state.second_moment.try_emplace(name, Tensor<T>(p.shape()));
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    if (!m.same_shape(p) || !v.same_shape(p))
      throw std::invalid_argument("adamw: state shape mismatch for '" + name + "'");

    const T decay = T(1) - hp.lr * hp.weight_decay;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= decay;
      m[i] = hp.beta1 * m[i] + (T(1) - hp.beta1) * g[i];
      v[i] = hp.beta2 * v[i] + (T(1) - hp.beta2) * g[i] * g[i];
      const T m_hat = m[i] / bc1;
      const T v_hat = v[i] / bc2;
      p[i] -= hp.lr * m_hat / (std::sqrt(v_hat) + hp.eps);
    }
  }
}

// lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*step/total)).
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step out of range");
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(phase));
}

}  // namespace msv

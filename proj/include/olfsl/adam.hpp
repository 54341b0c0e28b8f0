#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "olfsl/errors.hpp"
#include "olfsl/tensor.hpp"

namespace olfsl {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Per-parameter first/second moment accumulators plus the shared step counter.
template <typename T>
struct AdamState {
  AdamHyper hyper;
  std::int64_t t = 0;
  NamedTensors<T> m;
  NamedTensors<T> v;
};

template <typename T>
AdamState<T> adam_init(const NamedTensors<T>& params, const AdamHyper& hyper) {
  AdamState<T> state;
  state.hyper = hyper;
  for (const auto& [name, p] : params) {
    state.m.emplace(name, Tensor<T>::zeros(p.shape));
    state.v.emplace(name, Tensor<T>::zeros(p.shape));
  }
  return state;
}

// Standard Adam with bias correction and no weight decay.
template <typename T>
void adam_step(NamedTensors<T>& params, const NamedTensors<T>& grads, AdamState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw LogicError("adam_step: parameter/gradient/state key sets differ in size");
  }
  state.t += 1;
  const T lr = static_cast<T>(state.hyper.lr);
  const T b1 = static_cast<T>(state.hyper.beta1);
  const T b2 = static_cast<T>(state.hyper.beta2);
  const T eps = static_cast<T>(state.hyper.epsilon);
  const T bc1 = T(1) - static_cast<T>(std::pow(state.hyper.beta1, static_cast<double>(state.t)));
  const T bc2 = T(1) - static_cast<T>(std::pow(state.hyper.beta2, static_cast<double>(state.t)));
  for (auto& [name, p] : params) {
    const auto git = grads.find(name);
    const auto mit = state.m.find(name);
    const auto vit = state.v.find(name);
    if (git == grads.end() || mit == state.m.end() || vit == state.v.end()) {
      throw LogicError("adam_step: no gradient/state for parameter '" + name + "'");
    }
    const Tensor<T>& g = git->second;
    if (g.shape != p.shape) {
      throw LogicError("adam_step: gradient shape " + shape_str(g.shape) + " != parameter shape " +
                       shape_str(p.shape) + " for '" + name + "'");
    }
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const T gi = g.data[i];
      m.data[i] = b1 * m.data[i] + (T(1) - b1) * gi;
      v.data[i] = b2 * v.data[i] + (T(1) - b2) * gi * gi;
      const T m_hat = m.data[i] / bc1;
      const T v_hat = v.data[i] / bc2;
      p.data[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace olfsl

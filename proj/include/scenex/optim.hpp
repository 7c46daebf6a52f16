#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "scenex/autodiff.hpp"

namespace scenex {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, Tensor> m, v;
  long step = 0;
  bool operator==(const AdamState&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

// Bias-corrected adaptive-moment step with decoupled weight decay:
// x <- x - lr * wd * x - lr * m_hat / (sqrt(v_hat) + eps).
// Throws before touching anything if a gradient is missing or non-finite.
inline void adamw_step(const NamedTensors& params, const GradientMap& grads, AdamState& state,
                       const AdamWConfig& cfg) {
  for (const auto& [name, t] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ContractError("optimizer: no gradient for '" + name + "'");
    if (it->second.size() != t->size()) throw ShapeError("optimizer", "gradient size for '" + name + "'");
    for (std::size_t i = 0; i < t->size(); ++i) {
      if (!std::isfinite(it->second[i])) {
        throw Error("optimizer: non-finite gradient in '" + name + "' at index " + std::to_string(i));
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (const auto& [name, t] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.try_emplace(name, t->shape(), 0.0).first->second;
    Tensor& v = state.v.try_emplace(name, t->shape(), 0.0).first->second;
    for (std::size_t i = 0; i < t->size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1, vh = v[i] / bc2;
      double& x = (*t)[i];
      x -= cfg.learning_rate * cfg.weight_decay * x;
      x -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

}  // namespace scenex

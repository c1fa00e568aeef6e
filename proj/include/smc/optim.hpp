#pragma once

#include <span>
#include <vector>

#include "smc/tensor.hpp"

namespace smc {

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
struct SgdState {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::vector<std::vector<double>> velocity;  // lazily shaped on first step
};

/// v <- momentum*v + grad + weight_decay*param ; param <- param - lr*v
inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, SgdState& state) {
  require(params.size() == grads.size(), "sgd_step: parameter and gradient counts differ");
  require(state.learning_rate >= 0.0, "sgd_step: negative learning rate");
  require(state.momentum >= 0.0 && state.momentum < 1.0, "sgd_step: momentum must lie in [0,1)");
  require(state.weight_decay >= 0.0, "sgd_step: negative weight decay");
  if (state.velocity.empty()) {
    for (const auto* p : params) state.velocity.emplace_back(p->size(), 0.0);
  }
  require(state.velocity.size() == params.size(), "sgd_step: velocity buffers do not match parameters");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    const auto& g = grads[k];
    auto& v = state.velocity[k];
    require(p.shape == g.shape, "sgd_step: shape mismatch " + shape_string(p.shape) + " vs " + shape_string(g.shape));
    require(v.size() == p.size(), "sgd_step: velocity buffer size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = state.momentum * v[i] + g.values[i] + state.weight_decay * p.values[i];
      p.values[i] -= state.learning_rate * v[i];
    }
  }
}

}  // namespace smc

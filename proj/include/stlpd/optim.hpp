#pragma once

#include <map>
#include <string>
#include <vector>

#include "stlpd/tensor.hpp"

namespace stlpd {

// Named trainable tensor with its momentum buffer.
struct Param {
  Tensor tensor;
  std::vector<float> momentum;  // zero-initialized, same length as data
};

using ParamMap = std::map<std::string, Param>;

// SGD with momentum and decoupled-from-nothing classic weight decay:
//   v <- m*v + g + wd*w;  w <- w - lr*v
// Applied to every parameter; a missing gradient is an error.
inline void sgd_step(ParamMap& params, float lr, float momentum = 0.9f,
                     float weight_decay = 5e-4f) {
  for (auto& [name, p] : params) {
    auto& g = p.tensor.grad();
    if (g.empty()) throw std::runtime_error("sgd_step: parameter '" + name + "' has no gradient");
    auto& w = p.tensor.data();
    for (size_t i = 0; i < w.size(); ++i) {
      p.momentum[i] = momentum * p.momentum[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * p.momentum[i];
    }
  }
}

inline void zero_grads(ParamMap& params) {
  for (auto& [name, p] : params) {
    (void)name;
    auto& g = p.tensor.grad();
    std::fill(g.begin(), g.end(), 0.0f);
  }
}

}  // namespace stlpd

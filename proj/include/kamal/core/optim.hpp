#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kamal/core/error.hpp"
#include "kamal/core/tensor.hpp"

namespace kamal {

// Trainable tensor with its gradient accumulator and momentum buffer.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor velocity;

  Param() = default;
  Param(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), velocity(value.shape()) {}

  void zero_grad() { grad.fill(0.0f); }
};

struct SgdConfig {
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
};

inline void validate(const SgdConfig& c) {
  require<ConfigError>(c.lr >= 0.0f, "learning rate must be non-negative, got ", c.lr);
  require<ConfigError>(c.momentum >= 0.0f && c.momentum < 1.0f, "momentum must be in [0,1), got ", c.momentum);
  require<ConfigError>(c.weight_decay >= 0.0f, "weight decay must be non-negative, got ", c.weight_decay);
}

// velocity <- momentum*velocity + grad + decay*value; value -= lr*velocity;
// gradients are reset afterwards. All gradients are checked before any
// parameter is touched.
inline void sgd_step(std::span<Param* const> params, const SgdConfig& cfg) {
  validate(cfg);
  for (const Param* p : params)
    require<NumericError>(p->grad.all_finite(), "non-finite gradient in parameter '", p->name, "'");
  for (Param* p : params) {
    auto v = p->value.data();
    auto g = p->grad.data();
    auto m = p->velocity.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      m[i] = cfg.momentum * m[i] + g[i] + cfg.weight_decay * v[i];
      v[i] -= cfg.lr * m[i];
    }
    p->zero_grad();
  }
}

inline void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

}  // namespace kamal

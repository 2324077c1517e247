#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "topo/autodiff/engine.hpp"

namespace topo::ad {

struct AdamOptions {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

struct OptimizerState {
  AdamOptions options;
  std::int64_t step = 0;
  std::map<std::string, Tensor, std::less<>> first_moment;
  std::map<std::string, Tensor, std::less<>> second_moment;
};

/// Bias-corrected Adam update of every parameter that has a gradient.
/// Increments state.step by exactly one.
void adam_step(ParameterStore& params, const Gradients& grads, OptimizerState& state);

}  // namespace topo::ad

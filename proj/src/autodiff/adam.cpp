#include "topo/autodiff/adam.hpp"

#include <cmath>

namespace topo::ad {

void adam_step(ParameterStore& params, const Gradients& grads, OptimizerState& state) {
  for (const auto& [name, g] : grads.parameters) {
    if (params.get(name).shape() != g.shape()) {
      throw ShapeError("adam_step: gradient shape " + shape_string(g.shape()) + " does not match parameter '" +
                       name + "'");
    }
  }
  state.step += 1;
  const auto& o = state.options;
  const double bc1 = 1.0 - std::pow(static_cast<double>(o.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(o.beta2), static_cast<double>(state.step));
  const double step_size = o.learning_rate / bc1;
  for (const auto& [name, g] : grads.parameters) {
    Tensor& p = params.get(name);
    auto [mit, m_new] = state.first_moment.try_emplace(name, p.shape());
    auto [vit, v_new] = state.second_moment.try_emplace(name, p.shape());
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) throw ShapeError("adam_step: moment shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0f - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0f - o.beta2) * g[i] * g[i];
      const double denom = std::sqrt(v[i] / bc2) + o.epsilon;
      p[i] = static_cast<float>(p[i] - step_size * m[i] / denom);
    }
  }
}

}  // namespace topo::ad

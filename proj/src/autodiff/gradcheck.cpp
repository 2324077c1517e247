#include "topo/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace topo::ad {

namespace {

std::vector<std::size_t> pick_elements(std::size_t n, int limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit > 0 && n > static_cast<std::size_t>(limit)) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(limit));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

double relative_error(double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8}); }

TensorMapD to_double(const TensorMap& m) {
  TensorMapD out;
  for (const auto& [k, v] : m) out.emplace(k, tensor_cast<double>(v));
  return out;
}

GradientsD analytic_gradients(const Graph& graph, const ParameterStore& params, const TensorMap& inputs, NodeId loss,
                              const GradcheckOptions& options) {
  const BackwardOptions bopts{true, options.inputs};
  GradientsD out;
  if (options.analytic_float64) {
    const auto pd = parameters_cast<double>(params);
    out = gradients(evaluate(graph, pd, to_double(inputs)), loss, bopts);
  } else {
    const Gradients g = gradients(evaluate(graph, params, inputs), loss, bopts);
    for (const auto& [k, v] : g.parameters) out.parameters.emplace(k, tensor_cast<double>(v));
    for (const auto& [k, v] : g.inputs) out.inputs.emplace(k, tensor_cast<double>(v));
  }
  if (options.tamper) options.tamper(out);
  return out;
}

}  // namespace

GradcheckReport gradcheck(const Graph& graph, const ParameterStore& params, const TensorMap& inputs, NodeId loss,
                          const GradcheckOptions& options) {
  const GradientsD analytic = analytic_gradients(graph, params, inputs, loss, options);

  auto pd = parameters_cast<double>(params);
  const TensorMapD base_inputs = to_double(inputs);
  auto loss_at = [&](const TensorMapD& in) { return evaluate(graph, pd, in).scalar(loss); };

  std::mt19937_64 rng(options.seed);
  GradcheckReport report;
  auto check_tensor = [&](const std::string& name, TensorD& target, const TensorD& grad, const TensorMapD& in) {
    GradcheckEntry entry{name};
    for (std::size_t i : pick_elements(target.size(), options.max_elements, rng)) {
      const double orig = target[i];
      target[i] = orig + options.step;
      const double up = loss_at(in);
      target[i] = orig - options.step;
      const double down = loss_at(in);
      target[i] = orig;
      const double numeric = (up - down) / (2.0 * options.step);
      entry.max_rel_error = std::max(entry.max_rel_error, relative_error(grad[i], numeric));
      ++entry.checked;
    }
    entry.pass = entry.max_rel_error <= options.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  };

  for (auto& [name, tensor] : pd.entries()) {
    auto it = analytic.parameters.find(name);
    if (it == analytic.parameters.end()) continue;
    check_tensor(name, tensor, it->second, base_inputs);
  }
  for (const auto& name : options.inputs) {
    TensorMapD perturbed = base_inputs;
    check_tensor("input:" + name, perturbed.at(name), analytic.inputs.at(name), perturbed);
  }
  return report;
}

}  // namespace topo::ad

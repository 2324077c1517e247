#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "topo/autodiff/engine.hpp"

namespace topo::ad {

struct GradcheckOptions {
  double tolerance = 1e-3;
  double step = 1e-5;
  /// Inputs to check in addition to all parameters.
  std::vector<std::string> inputs;
  /// Check at most this many randomly chosen elements per tensor (0 = all).
  int max_elements = 0;
  std::uint64_t seed = 0;
  /// Compute the reverse-mode side in float64 too (checks the formulas alone).
  bool analytic_float64 = false;
  /// Applied to the reverse-mode gradients before comparison (negative controls).
  std::function<void(GradientsD&)> tamper;
};

struct GradcheckEntry {
  std::string name;
  int checked = 0;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  bool pass = true;
};

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences. Relative error is |a-b| / max(|a|, |b|, 1e-8). The differences
/// are taken on a float64 copy of the parameters and inputs so that their
/// truncation and rounding error stays far below the tolerance.
GradcheckReport gradcheck(const Graph& graph, const ParameterStore& params, const TensorMap& inputs, NodeId loss,
                          const GradcheckOptions& options = {});

}  // namespace topo::ad

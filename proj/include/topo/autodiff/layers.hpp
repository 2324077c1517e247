#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "topo/autodiff/graph.hpp"

namespace topo::ad {

/// Adds parameterised layers to a graph, creating and initialising their
/// parameters in a store. Weights use He-style fan-in scaling from one seeded
/// generator, so a seed plus the construction order reproduces every value.
class NetBuilder {
 public:
  NetBuilder(Graph& graph, ParameterStore& params, std::uint64_t seed);

  /// k x k convolution with "same" zero padding (k odd).
  NodeId conv(NodeId x, const std::string& name, int cin, int cout, int k, int stride = 1, float gain = 1.0f,
              bool bias = true);
  NodeId dense(NodeId x, const std::string& name, int in, int out, float gain = 1.0f);
  NodeId group_norm(NodeId x, const std::string& name, int channels, int groups = 8);
  /// conv -> group norm -> SiLU. The conv has no bias; the norm's beta subsumes it.
  NodeId conv_block(NodeId x, const std::string& name, int cin, int cout, int stride = 1);

  Graph& graph() { return graph_; }
  ParameterStore& params() { return params_; }

 private:
  Tensor he_normal(Shape shape, int fan_in, float gain);

  Graph& graph_;
  ParameterStore& params_;
  std::mt19937_64 rng_;
};

}  // namespace topo::ad

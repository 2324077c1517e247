#include "topo/autodiff/layers.hpp"

#include <algorithm>
#include <cmath>

namespace topo::ad {

NetBuilder::NetBuilder(Graph& graph, ParameterStore& params, std::uint64_t seed)
    : graph_(graph), params_(params), rng_(seed) {}

Tensor NetBuilder::he_normal(Shape shape, int fan_in, float gain) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, gain * std::sqrt(2.0f / static_cast<float>(std::max(fan_in, 1))));
  for (auto& v : t.values()) v = dist(rng_);
  return t;
}

NodeId NetBuilder::conv(NodeId x, const std::string& name, int cin, int cout, int k, int stride, float gain,
                        bool bias) {
  params_.add(name + ".weight", he_normal({cout, cin, k, k}, cin * k * k, gain));
  const NodeId w = graph_.parameter(name + ".weight");
  NodeId b = kNoBias;
  if (bias) {
    params_.add(name + ".bias", Tensor({cout}));
    b = graph_.parameter(name + ".bias");
  }
  return graph_.conv2d(x, w, b, stride, k / 2);
}

NodeId NetBuilder::dense(NodeId x, const std::string& name, int in, int out, float gain) {
  params_.add(name + ".weight", he_normal({out, in}, in, gain));
  params_.add(name + ".bias", Tensor({out}));
  const NodeId w = graph_.parameter(name + ".weight");
  const NodeId b = graph_.parameter(name + ".bias");
  return graph_.dense(x, w, b);
}

NodeId NetBuilder::group_norm(NodeId x, const std::string& name, int channels, int groups) {
  params_.add(name + ".gamma", Tensor({channels}, 1.0f));
  params_.add(name + ".beta", Tensor({channels}));
  const NodeId g = graph_.parameter(name + ".gamma");
  const NodeId b = graph_.parameter(name + ".beta");
  return graph_.group_norm(x, g, b, std::min(groups, channels));
}

NodeId NetBuilder::conv_block(NodeId x, const std::string& name, int cin, int cout, int stride) {
  NodeId h = conv(x, name + ".conv", cin, cout, 3, stride, 1.0f, false);
  h = group_norm(h, name + ".norm", cout);
  return graph_.silu(h);
}

}  // namespace topo::ad

#include "topo/autodiff/graph.hpp"

#include <array>
#include <stdexcept>

namespace topo::ad {

namespace {

constexpr std::array<std::pair<OpKind, std::string_view>, 18> kOpNames{{
    {OpKind::Input, "input"},
    {OpKind::Parameter, "parameter"},
    {OpKind::Conv2d, "conv2d"},
    {OpKind::Upsample2x, "upsample2x"},
    {OpKind::Concat, "concat"},
    {OpKind::Dense, "dense"},
    {OpKind::Silu, "silu"},
    {OpKind::Sigmoid, "sigmoid"},
    {OpKind::GroupNorm, "group_norm"},
    {OpKind::GlobalAvgPool, "global_avg_pool"},
    {OpKind::Add, "add"},
    {OpKind::AddChannel, "add_channel"},
    {OpKind::MulChannel, "mul_channel"},
    {OpKind::Mul, "mul"},
    {OpKind::Scale, "scale"},
    {OpKind::Sum, "sum"},
    {OpKind::BceWithLogits, "bce_with_logits"},
    {OpKind::Mse, "mse"},
}};

}  // namespace

std::string_view op_name(OpKind op) {
  for (const auto& [k, n] : kOpNames)
    if (k == op) return n;
  return "unknown";
}

OpKind op_from_name(std::string_view name) {
  for (const auto& [k, n] : kOpNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown op '" + std::string(name) + "'");
}

NodeId Graph::push(Node n) {
  const NodeId id = size();
  for (NodeId in : n.inputs) {
    if (in < 0 || in >= id) throw std::invalid_argument("graph input id must precede node");
  }
  nodes_.push_back(std::move(n));
  return id;
}

NodeId Graph::input(std::string name) {
  if (find_input(name) >= 0) throw std::invalid_argument("duplicate graph input '" + name + "'");
  return push({OpKind::Input, {}, std::move(name)});
}

NodeId Graph::parameter(std::string name) { return push({OpKind::Parameter, {}, std::move(name)}); }

NodeId Graph::conv2d(NodeId x, NodeId weight, NodeId bias, int stride, int padding) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d stride must be 1 or 2");
  Node n{OpKind::Conv2d, {x, weight}, {}};
  if (bias != kNoBias) n.inputs.push_back(bias);
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

NodeId Graph::upsample2x(NodeId x) { return push({OpKind::Upsample2x, {x}, {}}); }
NodeId Graph::concat(NodeId a, NodeId b) { return push({OpKind::Concat, {a, b}, {}}); }
NodeId Graph::dense(NodeId x, NodeId weight, NodeId bias) { return push({OpKind::Dense, {x, weight, bias}, {}}); }
NodeId Graph::silu(NodeId x) { return push({OpKind::Silu, {x}, {}}); }
NodeId Graph::sigmoid(NodeId x) { return push({OpKind::Sigmoid, {x}, {}}); }

NodeId Graph::group_norm(NodeId x, NodeId gamma, NodeId beta, int groups) {
  Node n{OpKind::GroupNorm, {x, gamma, beta}, {}};
  n.groups = groups;
  return push(std::move(n));
}

NodeId Graph::global_avg_pool(NodeId x) { return push({OpKind::GlobalAvgPool, {x}, {}}); }
NodeId Graph::add(NodeId a, NodeId b) { return push({OpKind::Add, {a, b}, {}}); }
NodeId Graph::add_channel(NodeId x, NodeId per_channel) { return push({OpKind::AddChannel, {x, per_channel}, {}}); }
NodeId Graph::mul_channel(NodeId x, NodeId per_channel) { return push({OpKind::MulChannel, {x, per_channel}, {}}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push({OpKind::Mul, {a, b}, {}}); }

NodeId Graph::scale(NodeId x, float factor) {
  Node n{OpKind::Scale, {x}, {}};
  n.scalar = factor;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) { return push({OpKind::Sum, {x}, {}}); }
NodeId Graph::bce_with_logits(NodeId logits, NodeId labels) { return push({OpKind::BceWithLogits, {logits, labels}, {}}); }
NodeId Graph::mse(NodeId prediction, NodeId target) { return push({OpKind::Mse, {prediction, target}, {}}); }

void Graph::set_output(const std::string& name, NodeId id) {
  if (id < 0 || id >= size()) throw std::invalid_argument("output id out of range");
  outputs_[name] = id;
}

NodeId Graph::output(const std::string& name) const {
  auto it = outputs_.find(name);
  if (it == outputs_.end()) throw std::invalid_argument("graph has no output '" + name + "'");
  return it->second;
}

NodeId Graph::find_input(std::string_view name) const {
  for (NodeId i = 0; i < size(); ++i)
    if (nodes_[i].op == OpKind::Input && nodes_[i].name == name) return i;
  return -1;
}

std::vector<std::string> Graph::input_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.op == OpKind::Input) out.push_back(n.name);
  return out;
}

std::vector<std::string> Graph::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& n : nodes_)
    if (n.op == OpKind::Parameter) out.push_back(n.name);
  return out;
}

nlohmann::json Graph::to_json() const {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& n : nodes_) {
    nlohmann::json o{{"op", op_name(n.op)}, {"inputs", n.inputs}};
    if (!n.name.empty()) o["name"] = n.name;
    if (n.op == OpKind::Conv2d) {
      o["stride"] = n.stride;
      o["padding"] = n.padding;
    }
    if (n.op == OpKind::GroupNorm) o["groups"] = n.groups;
    if (n.op == OpKind::Scale) o["scalar"] = n.scalar;
    ops.push_back(std::move(o));
  }
  return {{"ops", ops}, {"outputs", outputs_}};
}

Graph Graph::from_json(const nlohmann::json& j) {
  Graph g;
  for (const auto& o : j.at("ops")) {
    Node n;
    n.op = op_from_name(o.at("op").get<std::string>());
    n.inputs = o.at("inputs").get<std::vector<NodeId>>();
    n.name = o.value("name", std::string{});
    n.stride = o.value("stride", 1);
    n.padding = o.value("padding", 0);
    n.groups = o.value("groups", 0);
    n.scalar = o.value("scalar", 0.0f);
    g.push(std::move(n));
  }
  for (const auto& [name, id] : j.at("outputs").items()) g.set_output(name, id.get<NodeId>());
  return g;
}

}  // namespace topo::ad

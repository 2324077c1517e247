#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/tensor.hpp"

namespace topo::ad {

using NodeId = int;

inline constexpr NodeId kNoBias = -1;

enum class OpKind {
  Input,
  Parameter,
  Conv2d,        // NCHW input, [Cout,Cin,k,k] weight, optional [Cout] bias; stride 1 or 2, zero padding
  Upsample2x,    // nearest neighbour
  Concat,        // channel axis
  Dense,         // [N,In] x [Out,In]^T + [Out]
  Silu,
  Sigmoid,
  GroupNorm,     // per-sample groups, affine gamma/beta per channel
  GlobalAvgPool, // [N,C,H,W] -> [N,C]
  Add,           // same shape
  AddChannel,    // [N,C,H,W] + [N,C] broadcast over space
  MulChannel,    // [N,C,H,W] * [N,C] broadcast over space
  Mul,           // same shape
  Scale,         // x * constant
  Sum,           // all elements -> [1]
  BceWithLogits, // mean over elements; second input is a non-differentiable label
  Mse,           // mean over elements
};

std::string_view op_name(OpKind op);
OpKind op_from_name(std::string_view name);

struct Node {
  OpKind op = OpKind::Input;
  std::vector<NodeId> inputs;
  std::string name;
  int stride = 1;
  int padding = 0;
  int groups = 0;
  float scalar = 0.0f;
};

/// Static computation graph. Nodes are appended in topological order, so every
/// node's inputs precede it and the graph is acyclic by construction.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId parameter(std::string name);
  NodeId conv2d(NodeId x, NodeId weight, NodeId bias, int stride, int padding);
  NodeId upsample2x(NodeId x);
  NodeId concat(NodeId a, NodeId b);
  NodeId dense(NodeId x, NodeId weight, NodeId bias);
  NodeId silu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, int groups);
  NodeId global_avg_pool(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId add_channel(NodeId x, NodeId per_channel);
  NodeId mul_channel(NodeId x, NodeId per_channel);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId x, float factor);
  NodeId sum(NodeId x);
  NodeId bce_with_logits(NodeId logits, NodeId labels);
  NodeId mse(NodeId prediction, NodeId target);

  void set_output(const std::string& name, NodeId id);
  NodeId output(const std::string& name) const;
  const std::map<std::string, NodeId>& outputs() const { return outputs_; }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Id of the Input node bound to `name`, or -1.
  NodeId find_input(std::string_view name) const;
  std::vector<std::string> input_names() const;
  std::vector<std::string> parameter_names() const;

  nlohmann::json to_json() const;
  static Graph from_json(const nlohmann::json& j);

 private:
  NodeId push(Node n);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> outputs_;
};

/// Ordered, named trainable parameters. Order is insertion order and defines the
/// checkpoint payload layout.
template <class T>
class BasicParameterStore {
 public:
  using TensorType = BasicTensor<T>;

  TensorType& add(const std::string& name, TensorType value) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }
  bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }
  TensorType& get(std::string_view name) { return entries_[locate(name)].second; }
  const TensorType& get(std::string_view name) const { return entries_[locate(name)].second; }

  const std::vector<std::pair<std::string, TensorType>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, TensorType>>& entries() { return entries_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }
  bool all_finite() const {
    for (const auto& e : entries_)
      if (!e.second.all_finite()) return false;
    return true;
  }

 private:
  std::size_t locate(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::pair<std::string, TensorType>> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

using ParameterStore = BasicParameterStore<float>;

template <class U, class T>
BasicParameterStore<U> parameters_cast(const BasicParameterStore<T>& src) {
  BasicParameterStore<U> out;
  for (const auto& [name, t] : src.entries()) out.add(name, tensor_cast<U>(t));
  return out;
}

}  // namespace topo::ad

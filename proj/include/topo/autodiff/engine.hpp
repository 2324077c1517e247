#pragma once

#include <map>
#include <string>
#include <vector>

#include "topo/autodiff/graph.hpp"
#include "topo/autodiff/tensor.hpp"

namespace topo::ad {

template <class T>
using BasicTensorMap = std::map<std::string, BasicTensor<T>, std::less<>>;
using TensorMap = BasicTensorMap<float>;
using TensorMapD = BasicTensorMap<double>;

struct EvalOptions {
  bool check_finite = true;
};

template <class T>
class BasicEvaluation;

template <class T>
BasicEvaluation<T> evaluate(const Graph& graph, const BasicParameterStore<T>& params, const BasicTensorMap<T>& inputs,
                            const EvalOptions& options = {});

/// Forward values of every node for one binding of the graph inputs. Holds
/// references to the graph and parameter store, which must outlive it.
template <class T>
class BasicEvaluation {
 public:
  using TensorType = BasicTensor<T>;

  const Graph& graph() const { return *graph_; }
  const BasicParameterStore<T>& parameters() const { return *params_; }
  const TensorType& value(NodeId id) const;
  const TensorType& output(const std::string& name) const { return value(graph_->output(name)); }
  /// Value of a one-element node; reductions report their double accumulator.
  double scalar(NodeId id) const;
  /// Per-node auxiliary state (group-norm statistics, reduction accumulators).
  const std::vector<double>& aux(NodeId id) const { return aux_.at(static_cast<std::size_t>(id)); }

 private:
  friend BasicEvaluation evaluate<T>(const Graph&, const BasicParameterStore<T>&, const BasicTensorMap<T>&,
                                     const EvalOptions&);

  const Graph* graph_ = nullptr;
  const BasicParameterStore<T>* params_ = nullptr;
  std::vector<TensorType> values_;
  std::vector<const TensorType*> view_;
  std::vector<std::vector<double>> aux_;
};

using Evaluation = BasicEvaluation<float>;
using EvaluationD = BasicEvaluation<double>;

template <class T>
struct BasicGradients {
  BasicTensorMap<T> parameters;
  BasicTensorMap<T> inputs;
};

using Gradients = BasicGradients<float>;
using GradientsD = BasicGradients<double>;

struct BackwardOptions {
  bool parameters = true;
  std::vector<std::string> inputs;
};

/// d(loss)/d(parameters) and d(loss)/d(requested inputs) for a scalar loss node.
template <class T>
BasicGradients<T> gradients(const BasicEvaluation<T>& eval, NodeId loss, const BackwardOptions& options = {});

/// Vector-Jacobian product: seeds node `output` with `seed` (same shape as its value).
template <class T>
BasicGradients<T> backward(const BasicEvaluation<T>& eval, NodeId output, const BasicTensor<T>& seed,
                           const BackwardOptions& options = {});

extern template class BasicEvaluation<float>;
extern template class BasicEvaluation<double>;
extern template Evaluation evaluate<float>(const Graph&, const ParameterStore&, const TensorMap&, const EvalOptions&);
extern template EvaluationD evaluate<double>(const Graph&, const BasicParameterStore<double>&, const TensorMapD&,
                                             const EvalOptions&);
extern template Gradients gradients<float>(const Evaluation&, NodeId, const BackwardOptions&);
extern template GradientsD gradients<double>(const EvaluationD&, NodeId, const BackwardOptions&);
extern template Gradients backward<float>(const Evaluation&, NodeId, const Tensor&, const BackwardOptions&);
extern template GradientsD backward<double>(const EvaluationD&, NodeId, const TensorD&, const BackwardOptions&);

}  // namespace topo::ad

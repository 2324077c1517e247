#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/engine.hpp"
#include "topo/autodiff/graph.hpp"

namespace topo::rewards {

enum class RewardKind { BC, FM };

std::string to_string(RewardKind k);
RewardKind reward_kind_from_string(const std::string& s);

/// Shallow conv classifier: three stride-2-after-the-first conv blocks, global
/// average pool, dense to one logit. Inputs are x_t, the conditioning stack
/// (BC only) and a constant t/T map.
struct RewardConfig {
  RewardKind kind = RewardKind::BC;
  int height = 32;
  int width = 32;
  std::vector<int> widths{16, 32, 64};
  int groups = 8;
  int T = 100;      // schedule length used for the t/T map
  int mln = 100;    // trained on t in [0, mln - 1]
  int stage = 1;

  bool uses_cond() const { return kind == RewardKind::BC; }
  int in_channels() const { return uses_cond() ? 8 : 2; }
  void validate() const;
  nlohmann::json to_json() const;
  static RewardConfig from_json(const nlohmann::json& j);
};

/// Probabilities and d/dx of sum_n log max(R_n, delta), per batch item.
struct LogRewardGrad {
  std::vector<double> probability;
  ad::Tensor grad;  // same shape as x
};

/// A differentiable probability that a design is valid.
class RewardFunction {
 public:
  virtual ~RewardFunction() = default;
  virtual std::vector<double> probability(const ad::Tensor& x, const ad::Tensor& cond,
                                          const std::vector<int>& t) const = 0;
  /// grad = d/dx of log max(R, delta), unscaled by any sharpening exponent.
  virtual LogRewardGrad log_grad(const ad::Tensor& x, const ad::Tensor& cond, const std::vector<int>& t,
                                 double delta) const = 0;
};

class RewardModel : public RewardFunction {
 public:
  static RewardModel create(const RewardConfig& config, std::uint64_t seed);
  static RewardModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path, const nlohmann::json& metadata = nlohmann::json::object()) const;

  /// x [N,1,H,W] in [-1, 1]; cond [N,6,H,W] (ignored by FM); t per item, 0 means clean.
  ad::TensorMap bind(const ad::Tensor& x, const ad::Tensor& cond, const std::vector<int>& t) const;
  std::vector<double> probability(const ad::Tensor& x, const ad::Tensor& cond,
                                  const std::vector<int>& t) const override;
  LogRewardGrad log_grad(const ad::Tensor& x, const ad::Tensor& cond, const std::vector<int>& t,
                         double delta) const override;

  const RewardConfig& config() const { return config_; }
  const ad::Graph& graph() const { return graph_; }
  const ad::ParameterStore& params() const { return params_; }
  ad::ParameterStore& params() { return params_; }

 private:
  RewardConfig config_;
  ad::Graph graph_;  // output "logit" [N,1]
  ad::ParameterStore params_;
};

/// Conv regressor on (topology, conditioning) predicting log-compliance.
struct RegressorConfig {
  int height = 32;
  int width = 32;
  std::vector<int> widths{16, 32, 64};
  int groups = 8;

  void validate() const;
  nlohmann::json to_json() const;
  static RegressorConfig from_json(const nlohmann::json& j);
};

class ComplianceFunction {
 public:
  virtual ~ComplianceFunction() = default;
  /// d/dx of the summed predicted log-compliance.
  virtual ad::Tensor grad(const ad::Tensor& x, const ad::Tensor& cond) const = 0;
};

class ComplianceRegressor : public ComplianceFunction {
 public:
  static ComplianceRegressor create(const RegressorConfig& config, std::uint64_t seed);
  static ComplianceRegressor load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path, const nlohmann::json& metadata = nlohmann::json::object()) const;

  ad::TensorMap bind(const ad::Tensor& x, const ad::Tensor& cond) const;
  std::vector<double> predict_log(const ad::Tensor& x, const ad::Tensor& cond) const;
  ad::Tensor grad(const ad::Tensor& x, const ad::Tensor& cond) const override;

  const RegressorConfig& config() const { return config_; }
  const ad::Graph& graph() const { return graph_; }
  const ad::ParameterStore& params() const { return params_; }
  ad::ParameterStore& params() { return params_; }

 private:
  RegressorConfig config_;
  ad::Graph graph_;  // output "log_compliance" [N,1]
  ad::ParameterStore params_;
};

}  // namespace topo::rewards

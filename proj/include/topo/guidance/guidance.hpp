#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/diffusion/sampler.hpp"
#include "topo/rewards/reward_model.hpp"

namespace topo::guidance {

/// Strengths, sharpening exponents and noise cutoffs. A reward is active at
/// step t when t < its MLN.
struct GuidanceConfig {
  double lambda_bc = 1.0;
  double lambda_fm = 1.0;
  double eta_c = 1e-3;
  double eta_f = 0.0;
  double alpha_bc = 2.0;
  double alpha_fm = 2.0;
  int mln_bc = 0;  // 0 resolves to T
  int mln_fm = 0;  // 0 resolves to floor(0.3 T)
  double delta = 1e-6;
  bool clip = true;  // shift norm <= 2 sqrt(Sigma_t H W) per item

  /// Defaults with the MLN fields filled in for a schedule of length T.
  static GuidanceConfig defaults(int T);
  /// All strengths zero: sampling reduces to the unguided sampler.
  static GuidanceConfig zero();
  GuidanceConfig resolved(int T) const;
  void validate(int T) const;
  bool inactive() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static GuidanceConfig from_json(const nlohmann::json& j);
};

struct GuidanceModels {
  std::vector<const rewards::RewardFunction*> bc;  // averaged when more than one
  std::vector<const rewards::RewardFunction*> fm;
  const rewards::ComplianceFunction* compliance = nullptr;
  const rewards::RewardFunction* floating = nullptr;  // legacy classifier, weighted by eta_f
};

/// alpha * d/dx log max(R, delta) for a single reward.
ad::Tensor reward_log_grad(const rewards::RewardFunction& reward, const ad::Tensor& x, const ad::Tensor& cond,
                           int t, double alpha, double delta);

/// Arithmetic mean of the member probabilities.
std::vector<double> ensemble_reward(const std::vector<const rewards::RewardFunction*>& models, const ad::Tensor& x,
                                    const ad::Tensor& cond, int t);

/// d/dx log max(mean_k R_k, delta) = sum_k R_k d/dx log R_k / (K mean_k R_k).
rewards::LogRewardGrad ensemble_log_grad(const std::vector<const rewards::RewardFunction*>& models,
                                         const ad::Tensor& x, const ad::Tensor& cond, int t, double delta);

struct TraceStep {
  int t = 0;
  double grad_bc = 0.0;  // norms of the unscaled log-reward gradients
  double grad_fm = 0.0;
  double grad_c = 0.0;
  double grad_f = 0.0;
  double shift = 0.0;    // norm of the applied mean shift
  bool active_bc = false;
  bool active_fm = false;
  bool clipped = false;
};

struct GuidanceTrace {
  std::vector<TraceStep> steps;  // in sampling order, t = T first

  void write_csv(std::ostream& os) const;
};

/// mu + Sigma [lambda_bc alpha_bc g_bc 1{t < MLN_bc} + lambda_fm alpha_fm g_fm 1{t < MLN_fm} + eta_f g_f]
///    - eta_c Sigma grad c_phi, per batch item, with optional norm clipping.
/// `traces`, when given, receives one step per batch item.
void guided_mean(ad::Tensor& mu, double sigma, const ad::Tensor& x_t, const ad::Tensor& cond, int t,
                 const GuidanceModels& models, const GuidanceConfig& config, int T,
                 std::vector<TraceStep>* traces = nullptr);

struct CensoredResult {
  diffusion::SampleResult sample;
  std::vector<GuidanceTrace> traces;  // one per chain
};

/// diffusion::sample with guided_mean as its mean hook.
CensoredResult censored_sample(const diffusion::EpsPredictor& model, const ad::Tensor& cond,
                               const diffusion::NoiseSchedule& schedule, const GuidanceModels& models,
                               const GuidanceConfig& config, const diffusion::SampleOptions& options);

}  // namespace topo::guidance

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/tensor.hpp"

namespace topo::diffusion {

enum class ScheduleKind { Linear, Cosine };

/// Per-step arrays indexed by t = 1..T (slot 0 holds the t = 0 identity).
struct NoiseSchedule {
  int T = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;  // fixed posterior variance; sigma[1] = beta[1]

  void check_step(int t) const;
  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

/// Linear: beta from 1e-4 * (1000/T) to 0.02 * (1000/T). Cosine: the squared
/// cosine alpha_bar with offset 0.008, betas capped at 0.999.
NoiseSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::Linear);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, elementwise.
ad::Tensor q_sample(const ad::Tensor& x0, int t, const ad::Tensor& eps, const NoiseSchedule& schedule);

/// Per-sample variant: t[n] applies to batch item n of [N, ...] tensors.
ad::Tensor q_sample(const ad::Tensor& x0, const std::vector<int>& t, const ad::Tensor& eps,
                    const NoiseSchedule& schedule);

}  // namespace topo::diffusion

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "topo/diffusion/denoiser.hpp"
#include "topo/fea/field.hpp"

namespace topo::diffusion {

struct PosteriorMean {
  ad::Tensor mean;
  double sigma = 0.0;  // variance Sigma_t, shared by every element
};

/// (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t).
ad::Tensor posterior_mean_from_eps(const ad::Tensor& x_t, const ad::Tensor& eps, int t, const NoiseSchedule& schedule);

PosteriorMean posterior_mean(const EpsPredictor& model, const ad::Tensor& x_t, int t, const ad::Tensor& cond,
                             const NoiseSchedule& schedule);

/// May rewrite `mean` in place. `first_chain` is the global index of batch item 0.
using MeanHook = std::function<void(ad::Tensor& mean, double sigma, const ad::Tensor& x_t, int t,
                                    const ad::Tensor& cond, int first_chain)>;

struct SampleOptions {
  std::uint64_t seed = 0;
  MeanHook hook;         // identity when empty
  int chunk = 32;        // chains evaluated together
  int first_chain = 0;   // chain n draws from derive_seed(seed, first_chain + n)
};

struct SampleResult {
  ad::Tensor raw;                       // final x_0 before clamping, [N,1,H,W]
  std::vector<fea::Field2D> density;    // clamp to [-1, 1], mapped to [0, 1]
  std::vector<fea::Field2D> binary;     // density >= 0.5
};

/// Ancestral sampling from x_T ~ N(0, I), one chain per conditioning item.
/// No noise is added on the final step.
SampleResult sample(const EpsPredictor& model, const ad::Tensor& cond, const NoiseSchedule& schedule,
                    const SampleOptions& options = {});

/// [-1, 1] tensor item n -> [0, 1] field (clamped).
fea::Field2D to_density(const ad::Tensor& x, int n);
/// [0, 1] field -> [1,1,H,W] tensor in [-1, 1].
ad::Tensor from_density(const fea::Field2D& f);

}  // namespace topo::diffusion

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/tensor.hpp"
#include "topo/fea/fea.hpp"

namespace topo::rewards {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for k successes in n trials.
Interval wilson_interval(int k, int n, double z = 1.959963984540054);

struct ZTest {
  double z = 0.0;             // (p1 - p2) / pooled standard error
  double p_two_sided = 1.0;
  double p_one_sided = 1.0;   // alternative: rate 2 is lower than rate 1
};

/// Pooled two-proportion z-test of k1/n1 against k2/n2.
ZTest two_proportion_z(int k1, int n1, int k2, int n2);

struct EvalScenario {
  std::string id;
  fea::ScenarioSpec spec;
  ad::Tensor cond;  // [6,H,W]
};

/// Given stacked conditioning [M,6,H,W] and a seed, returns M thresholded
/// topologies. Chain m must depend only on (seed, m) so that samplers share
/// their noise.
using SamplerFn = std::function<std::vector<fea::Field2D>(const ad::Tensor& cond, std::uint64_t seed)>;

struct NamedSampler {
  std::string name;
  SamplerFn fn;
};

struct RateEstimate {
  int failures = 0;
  int total = 0;
  double rate = 0.0;
  Interval ci;
};

struct SamplerReport {
  std::string name;
  RateEstimate bc;
  RateEstimate fm;
  ZTest bc_vs_baseline;
  ZTest fm_vs_baseline;
  double mean_volume_error = 0.0;  // |mean density - vf| averaged over samples
  std::vector<int> bc_fail;  // per sample, 1 = violation
  std::vector<int> fm_fail;
};

struct FailureReport {
  int scenarios = 0;
  int per_condition = 0;
  std::uint64_t seed = 0;
  std::vector<SamplerReport> samplers;  // samplers[0] is the baseline

  nlohmann::json to_json() const;
  std::string to_markdown() const;
};

/// Runs every sampler on n scenarios x k samples (chain i*k + j is scenario i,
/// replicate j) with one shared seed and judges each output with the oracle.
FailureReport evaluate_failure_rates(const std::vector<NamedSampler>& samplers,
                                     const std::vector<EvalScenario>& scenarios, int per_condition,
                                     std::uint64_t seed);

}  // namespace topo::rewards

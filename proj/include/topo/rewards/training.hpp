#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/diffusion/schedule.hpp"
#include "topo/fea/field.hpp"
#include "topo/rewards/reward_model.hpp"

namespace topo::rewards {

/// One judged design: a {0,1} topology, its [6,H,W] conditioning and the
/// label (1 = valid for the kind being trained).
struct LabeledSample {
  fea::Field2D topology;
  ad::Tensor cond;
  int y = 0;
};

/// Mirror left-right. For the conditioning stack the load-x channel also
/// changes sign. Both are involutions.
fea::Field2D flip_horizontal(const fea::Field2D& f);
ad::Tensor flip_cond(const ad::Tensor& cond);  // [6,H,W] or [N,6,H,W]

struct RewardSetOptions {
  int K = 8;              // noised copies per sample (and per flip)
  bool flip = true;
  bool jitter = true;
  double jitter_sigma = 0.02;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct RewardTrainingSet {
  ad::Tensor x;     // [M,1,H,W] noised states
  ad::Tensor cond;  // [M,6,H,W]
  std::vector<int> t;
  std::vector<float> y;

  int size() const { return static_cast<int>(t.size()); }
};

/// For each sample (and its mirror when flipping) draws K timesteps uniform
/// in [0, mln - 1] and noises the jittered x0 with q_sample (t = 0 is clean).
RewardTrainingSet make_reward_training_set(const std::vector<LabeledSample>& samples,
                                           const diffusion::NoiseSchedule& schedule, int mln,
                                           const RewardSetOptions& options);

struct RewardTrainOptions {
  int epochs = 30;
  int batch_size = 32;
  float learning_rate = 2e-3f;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
  RewardSetOptions set;

  nlohmann::json to_json() const;
};

struct RewardMetrics {
  std::vector<double> epoch_loss;
  int train_samples = 0;
  int heldout_samples = 0;
  double heldout_accuracy = 0.0;  // clean (t = 0) held-out samples, threshold 0.5
  double train_accuracy = 0.0;    // clean training samples

  nlohmann::json to_json() const;
};

struct RewardTrainResult {
  RewardModel model;
  RewardMetrics metrics;
};

/// Splits the samples (stratified, seeded), trains with BCE on the noised set
/// built from the training part and scores the held-out part clean.
RewardTrainResult train_reward(const RewardConfig& config, const std::vector<LabeledSample>& samples,
                               const diffusion::NoiseSchedule& schedule, const RewardTrainOptions& options);

/// Fraction of samples whose clean prediction (>= 0.5) matches the label.
double clean_accuracy(const RewardModel& model, const std::vector<LabeledSample>& samples);

struct ComplianceSample {
  fea::Field2D topology;
  ad::Tensor cond;  // [6,H,W]
  double compliance = 0.0;
};

struct RegressorTrainOptions {
  int epochs = 60;
  int batch_size = 32;
  float learning_rate = 2e-3f;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct RegressorMetrics {
  std::vector<double> epoch_loss;
  int train_samples = 0;
  int heldout_samples = 0;
  double heldout_median_rel_error = 0.0;  // |exp(pred) - C| / C

  nlohmann::json to_json() const;
};

struct RegressorTrainResult {
  ComplianceRegressor model;
  RegressorMetrics metrics;
};

RegressorTrainResult train_compliance_regressor(const RegressorConfig& config,
                                                const std::vector<ComplianceSample>& samples,
                                                const RegressorTrainOptions& options);

/// [N,1,H,W] tensor in [-1, 1] from {0,1} fields.
ad::Tensor stack_topologies(const std::vector<fea::Field2D>& fields);

}  // namespace topo::rewards

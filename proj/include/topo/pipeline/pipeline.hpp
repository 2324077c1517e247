#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "topo/diffusion/denoiser.hpp"
#include "topo/guidance/guidance.hpp"
#include "topo/pipeline/config.hpp"
#include "topo/pipeline/sample_store.hpp"
#include "topo/rewards/evaluation.hpp"
#include "topo/rewards/reward_model.hpp"
#include "topo/simp/dataset.hpp"

namespace topo::pipeline {

/// Failure inside a stage (as opposed to a bad config).
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Scenario {
  std::string id;
  simp::SupportTemplate support = simp::SupportTemplate::LeftEdge;
  fea::ScenarioSpec spec;
  ad::Tensor cond;  // [6,H,W]
};

/// n scenarios over all support templates, including the one held out of the
/// training data.
std::vector<Scenario> draw_scenarios(int n, int nel_x, int nel_y, double vf_min, double vf_max, std::uint64_t seed,
                                     const std::string& prefix);

/// [N,6,H,W] from per-scenario stacks, each repeated `k` times in a row.
ad::Tensor stack_conditions(const std::vector<Scenario>& scenarios, int k = 1);

/// Trained networks for one guidance stage. Stage 0 has no rewards; stage 2
/// carries the stage-1 and stage-2 members of each ensemble.
struct StageModels {
  int stage = 0;
  diffusion::Denoiser denoiser;
  std::optional<rewards::ComplianceRegressor> regressor;
  std::vector<rewards::RewardModel> bc;
  std::vector<rewards::RewardModel> fm;

  guidance::GuidanceModels view() const;
};

/// Stage 0 keeps only the compliance term, so reward guidance is the sole
/// difference between the stages.
guidance::GuidanceConfig stage_guidance(const guidance::GuidanceConfig& base, int stage);

/// Runs and caches pipeline stages. A stage lives in
/// <data_dir>/<name>-<hash of its inputs> and is complete once its
/// stage.json marker exists; complete stages are reused unless forced.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config, std::ostream* log = nullptr);

  const RunConfig& config() const { return config_; }
  /// Rebuild the named stage (e.g. "denoiser", "reward-bc-1") the next time
  /// it is requested, even if a complete copy exists.
  void force(const std::string& stage_name) { force_.push_back(stage_name); }

  std::filesystem::path dataset_dir();
  std::filesystem::path denoiser_path();
  /// Empty when the regressor is disabled.
  std::filesystem::path regressor_path();
  /// Oracle-labeled designs generated with stage - 1 guidance (stage 1 or 2).
  std::filesystem::path labels_dir(int stage);
  /// Empty when the labels of that stage hold a single class for the kind.
  std::filesystem::path reward_path(rewards::RewardKind kind, int stage);
  StageModels models(int stage);

  /// Guided samples for every item of cond [N,6,H,W].
  guidance::CensoredResult generate(const StageModels& models, const ad::Tensor& cond, std::uint64_t seed,
                                    int first_chain = 0) const;

  /// Baseline, stage 1 and stage 2 on config().evaluation; writes
  /// report.json and report.md into the returned directory.
  std::filesystem::path evaluate();

 private:
  struct Stage {
    std::filesystem::path dir;
    bool done = false;
  };
  Stage open_stage(const std::string& name, const nlohmann::json& inputs);
  void collect_upstream(const nlohmann::json& j, nlohmann::json& stamps) const;
  void finish_stage(const Stage& s, const nlohmann::json& inputs, const nlohmann::json& summary);
  void say(const std::string& line) const;
  /// Upstream outputs enter stage keys relative to data_dir.
  std::string rel(const std::filesystem::path& p) const;
  nlohmann::json dataset_inputs() const;
  nlohmann::json denoiser_inputs();
  nlohmann::json regressor_inputs();
  nlohmann::json labels_inputs(int stage);
  nlohmann::json reward_inputs(rewards::RewardKind kind, int stage);

  RunConfig config_;
  diffusion::NoiseSchedule schedule_;
  std::ostream* log_ = nullptr;
  std::vector<std::string> force_;  // pending rebuilds, consumed when opened
  std::vector<std::filesystem::path> announced_;
};

}  // namespace topo::pipeline

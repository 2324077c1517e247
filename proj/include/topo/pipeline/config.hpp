#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "topo/diffusion/denoiser.hpp"
#include "topo/diffusion/schedule.hpp"
#include "topo/guidance/guidance.hpp"
#include "topo/rewards/reward_model.hpp"
#include "topo/rewards/training.hpp"
#include "topo/simp/simp.hpp"

namespace topo::pipeline {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DatasetSection {
  int n = 800;
  double vf_min = 0.3;
  double vf_max = 0.5;
  simp::SimpOptions simp;
};

struct ScheduleSection {
  int T = 100;
  diffusion::ScheduleKind kind = diffusion::ScheduleKind::Linear;
};

struct RewardSection {
  std::vector<int> widths{16, 32, 64};
  int groups = 8;
  int labels_per_stage = 120;  // oracle-labeled generated samples per stage
  int label_pool = 0;          // candidates generated per stage; 0 means 4 x labels_per_stage

  int pool_size() const { return label_pool > 0 ? label_pool : 4 * labels_per_stage; }
  rewards::RewardTrainOptions train;
};

struct RegressorSection {
  bool enabled = true;
  rewards::RegressorConfig config;
  rewards::RegressorTrainOptions train;
};

struct EvaluationSection {
  int scenarios = 100;
  int per_condition = 3;
  int chunk = 32;
};

/// Everything a run depends on. Stage outputs live under data_dir in
/// directories named by a hash of the settings that feed them.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path data_dir = "runs";
  int nel_x = 64;
  int nel_y = 64;
  DatasetSection dataset;
  ScheduleSection schedule;
  diffusion::DenoiserConfig denoiser;
  diffusion::DenoiserTrainOptions denoiser_train;
  RegressorSection regressor;
  RewardSection reward;
  guidance::GuidanceConfig guidance;
  EvaluationSection evaluation;

  /// Network input sizes follow the grid.
  RunConfig();
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown top-level keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  diffusion::NoiseSchedule make_schedule() const;
  rewards::RewardConfig reward_config(rewards::RewardKind kind, int stage) const;
};

/// 16 hex digits of FNV-1a over the compact JSON dump.
std::string config_hash(const nlohmann::json& j);
/// Same digest over raw bytes.
std::string content_hash(std::string_view bytes);

}  // namespace topo::pipeline

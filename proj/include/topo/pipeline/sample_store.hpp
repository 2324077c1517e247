#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "topo/autodiff/tensor.hpp"
#include "topo/fea/fea.hpp"
#include "topo/rewards/labels.hpp"
#include "topo/rewards/reward_model.hpp"
#include "topo/rewards/training.hpp"

namespace topo::pipeline {

/// A generated design with everything needed to label it and train on it.
/// `stage` is the guidance stage that produced it (0 = unguided).
struct StoredSample {
  std::string id;
  std::string scenario_id;
  int stage = 0;
  fea::ScenarioSpec spec;
  ad::Tensor cond;  // [6,H,W]
  fea::Field2D density;
  fea::Field2D binary;
};

/// <dir>/<id>.tnsr plus <id>.png (topology) and <id>_cond.png. The tensor
/// file is written last, so an id that resolves has its images.
class SampleStore {
 public:
  explicit SampleStore(std::filesystem::path dir);

  void put(const StoredSample& s) const;
  StoredSample get(const std::string& id) const;
  bool contains(const std::string& id) const;
  std::filesystem::path topology_png(const std::string& id) const;
  std::filesystem::path conditions_png(const std::string& id) const;
  std::vector<std::string> ids() const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

/// Ids are restricted to [A-Za-z0-9_-] so they are safe as file names.
bool valid_sample_id(const std::string& id);

/// Latest label per sample for `kind`, joined with the stored design.
/// With a stage, keeps only samples generated by stage - 1 guidance.
std::vector<rewards::LabeledSample> labeled_samples(const rewards::LabelStore& labels, const SampleStore& samples,
                                                    rewards::RewardKind kind, std::optional<int> stage = {});

}  // namespace topo::pipeline

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace topo::pipeline {

struct CriterionCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline constexpr double kMinBcRelativeReduction = 0.30;
inline constexpr double kMaxBcPValue = 0.05;  // two-sided, baseline vs stage 1
inline constexpr double kStage2BcMargin = 0.02;

/// Failure-rate thresholds on a report with samplers baseline, stage-1 and
/// stage-2 (report.json layout).
std::vector<CriterionCheck> failure_rate_checks(const nlohmann::json& report);

}  // namespace topo::pipeline

#include "topo/pipeline/criteria.hpp"

#include <cstdio>
#include <stdexcept>

#include "topo/rewards/evaluation.hpp"

namespace topo::pipeline {

namespace {

const nlohmann::json& sampler(const nlohmann::json& report, const std::string& name) {
  for (const auto& s : report.at("samplers")) {
    if (s.at("name") == name) return s;
  }
  throw std::invalid_argument("report has no sampler '" + name + "'");
}

std::string fmt(const char* f, double a, double b, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

}  // namespace

std::vector<CriterionCheck> failure_rate_checks(const nlohmann::json& report) {
  const auto& b = sampler(report, "baseline");
  const auto& s1 = sampler(report, "stage-1");
  const auto& s2 = sampler(report, "stage-2");
  const auto count = [](const nlohmann::json& s, const char* k) {
    return std::pair{s.at(k).at("failures").get<int>(), s.at(k).at("total").get<int>()};
  };
  const auto [bk, bn] = count(b, "bc");
  const auto [k1, n1] = count(s1, "bc");
  const auto [k2, n2] = count(s2, "bc");
  const double rb = static_cast<double>(bk) / bn, r1 = static_cast<double>(k1) / n1, r2 = static_cast<double>(k2) / n2;
  const auto z = rewards::two_proportion_z(bk, bn, k1, n1);
  const double reduction = rb > 0.0 ? 1.0 - r1 / rb : 0.0;

  std::vector<CriterionCheck> out;
  out.push_back({"stage-1 BC relative reduction", rb > 0.0 && reduction >= kMinBcRelativeReduction,
                 fmt("baseline %.3f -> stage-1 %.3f (%.1f%% reduction)", rb, r1, 100.0 * reduction)});
  out.push_back({"stage-1 BC significance", z.p_two_sided < kMaxBcPValue && r1 < rb,
                 fmt("z = %.2f, two-sided p = %.4f", z.z, z.p_two_sided)});
  const auto [fbk, fbn] = count(b, "fm");
  const auto [f1k, f1n] = count(s1, "fm");
  const double fb = static_cast<double>(fbk) / fbn, f1 = static_cast<double>(f1k) / f1n;
  out.push_back({"stage-1 FM below baseline", f1 < fb, fmt("baseline %.3f -> stage-1 %.3f", fb, f1)});
  out.push_back({"stage-2 BC non-inferior", r2 <= r1 + kStage2BcMargin,
                 fmt("stage-1 %.3f, stage-2 %.3f (margin %.2f)", r1, r2, kStage2BcMargin)});
  return out;
}

}  // namespace topo::pipeline

#include "topo/rewards/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "topo/rewards/oracle.hpp"

namespace topo::rewards {

Interval wilson_interval(int k, int n, double z) {
  if (n <= 0) return {0.0, 1.0};
  const double p = static_cast<double>(k) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

ZTest two_proportion_z(int k1, int n1, int k2, int n2) {
  ZTest r;
  if (n1 <= 0 || n2 <= 0) return r;
  const double p1 = static_cast<double>(k1) / n1, p2 = static_cast<double>(k2) / n2;
  const double pooled = static_cast<double>(k1 + k2) / (n1 + n2);
  const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2));
  if (se == 0.0) return r;
  r.z = (p1 - p2) / se;
  r.p_two_sided = std::erfc(std::fabs(r.z) / std::sqrt(2.0));
  r.p_one_sided = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  return r;
}

namespace {

RateEstimate estimate(const std::vector<int>& fails) {
  RateEstimate e;
  e.total = static_cast<int>(fails.size());
  for (int f : fails) e.failures += f;
  e.rate = e.total ? static_cast<double>(e.failures) / e.total : 0.0;
  e.ci = wilson_interval(e.failures, e.total);
  return e;
}

nlohmann::json rate_json(const RateEstimate& e) {
  return {{"failures", e.failures}, {"total", e.total}, {"rate", e.rate}, {"ci95", {e.ci.lo, e.ci.hi}}};
}

nlohmann::json z_json(const ZTest& z) {
  return {{"z", z.z}, {"p_two_sided", z.p_two_sided}, {"p_one_sided", z.p_one_sided}};
}

}  // namespace

FailureReport evaluate_failure_rates(const std::vector<NamedSampler>& samplers,
                                     const std::vector<EvalScenario>& scenarios, int per_condition,
                                     std::uint64_t seed) {
  if (samplers.empty()) throw std::invalid_argument("evaluation needs at least one sampler");
  if (scenarios.empty() || per_condition < 1) throw std::invalid_argument("evaluation needs scenarios and k >= 1");
  std::vector<ad::Tensor> parts;
  for (const auto& s : scenarios) {
    ad::Shape shape{1};
    shape.insert(shape.end(), s.cond.shape().begin(), s.cond.shape().end());
    const ad::Tensor c = s.cond.reshaped(shape);
    for (int j = 0; j < per_condition; ++j) parts.push_back(c);
  }
  const ad::Tensor cond = ad::Tensor::stack_batch(parts);
  FailureReport report;
  report.scenarios = static_cast<int>(scenarios.size());
  report.per_condition = per_condition;
  report.seed = seed;
  for (const auto& ns : samplers) {
    const auto out = ns.fn(cond, seed);
    if (out.size() != parts.size()) {
      throw std::runtime_error("sampler '" + ns.name + "' returned " + std::to_string(out.size()) + " samples, expected " +
                               std::to_string(parts.size()));
    }
    SamplerReport sr;
    sr.name = ns.name;
    double vol = 0.0;
    for (std::size_t m = 0; m < out.size(); ++m) {
      const auto& sc = scenarios[m / per_condition];
      const ValidityVerdict v = oracle_verdict(out[m], sc.spec);
      sr.bc_fail.push_back(v.bc_valid ? 0 : 1);
      sr.fm_fail.push_back(v.fm_valid ? 0 : 1);
      vol += std::fabs(out[m].mean() - sc.spec.volume_fraction);
    }
    sr.mean_volume_error = vol / static_cast<double>(out.size());
    sr.bc = estimate(sr.bc_fail);
    sr.fm = estimate(sr.fm_fail);
    report.samplers.push_back(std::move(sr));
  }
  const auto& base = report.samplers[0];
  for (auto& sr : report.samplers) {
    sr.bc_vs_baseline = two_proportion_z(base.bc.failures, base.bc.total, sr.bc.failures, sr.bc.total);
    sr.fm_vs_baseline = two_proportion_z(base.fm.failures, base.fm.total, sr.fm.failures, sr.fm.total);
  }
  return report;
}

nlohmann::json FailureReport::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& s : samplers) {
    list.push_back({{"name", s.name},
                    {"bc", rate_json(s.bc)},
                    {"fm", rate_json(s.fm)},
                    {"bc_vs_baseline", z_json(s.bc_vs_baseline)},
                    {"fm_vs_baseline", z_json(s.fm_vs_baseline)},
                    {"mean_volume_error", s.mean_volume_error}});
  }
  return {{"scenarios", scenarios}, {"per_condition", per_condition}, {"seed", seed}, {"samplers", list}};
}

std::string FailureReport::to_markdown() const {
  std::ostringstream os;
  os << "Failure rates over " << scenarios << " scenarios x " << per_condition << " samples (seed " << seed << ")\n\n";
  os << "| sampler | BC fail % | 95% CI | p vs baseline | FM fail % | 95% CI | p vs baseline | mean vol err |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  char buf[512];
  for (const auto& s : samplers) {
    std::snprintf(buf, sizeof buf, "| %s | %.1f | %.1f-%.1f | %.3g | %.1f | %.1f-%.1f | %.3g | %.3f |\n", s.name.c_str(),
                  100 * s.bc.rate, 100 * s.bc.ci.lo, 100 * s.bc.ci.hi, s.bc_vs_baseline.p_one_sided, 100 * s.fm.rate,
                  100 * s.fm.ci.lo, 100 * s.fm.ci.hi, s.fm_vs_baseline.p_one_sided, s.mean_volume_error);
    os << buf;
  }
  os << "\np values are one-sided (sampler rate below baseline), pooled two-proportion z-test.\n";
  return os.str();
}

}  // namespace topo::rewards

#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "topo/fea/fea.hpp"

namespace topo::simp {

struct SimpOptions {
  int max_iterations = 200;
  double move = 0.2;
  double damping = 0.5;
  double r_min = 1.5;
  double change_tol = 0.01;  // stop when the largest density change falls below this

  void validate() const;
  nlohmann::json to_json() const;
  static SimpOptions from_json(const nlohmann::json& j);
};

/// dC/drho_e = -p rho_e^(p-1) (E - E_min) u_e^T k0 u_e.
fea::Field2D compliance_sensitivity(const fea::Field2D& densities, const fea::FeaResult& fea,
                                    const fea::Material& material);

/// Density-weighted mesh-independency filter with cone weights max(0, r_min - dist).
/// Identity for r_min <= 1.
fea::Field2D filter_sensitivities(const fea::Field2D& sens, const fea::Field2D& densities, double r_min);

class OcBracketError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Optimality-criteria update with a bisected volume multiplier; the mean of
/// the result equals vf within 1e-6.
fea::Field2D oc_update(const fea::Field2D& densities, const fea::Field2D& filtered_sens, double vf,
                       const SimpOptions& options);

struct SimpResult {
  fea::Field2D density;
  fea::Field2D binary;  // density >= 0.5
  double initial_compliance = 0.0;  // uniform rho = vf
  double compliance = 0.0;          // final continuous design
  double binary_compliance = 0.0;   // thresholded design
  std::vector<double> history;      // compliance of each iterate before its update
  std::vector<double> volume_history;
  int iterations = 0;
  bool converged = false;
};

SimpResult optimize(const fea::ScenarioSpec& spec, const SimpOptions& options = {},
                    const fea::Material& material = {});

fea::Field2D threshold(const fea::Field2D& density, double level = 0.5);

}  // namespace topo::simp

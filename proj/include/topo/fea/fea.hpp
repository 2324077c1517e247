#pragma once

#include <array>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "topo/fea/field.hpp"

namespace topo::fea {

class ScenarioError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The stiffness matrix is singular or numerically so (zero pivots, floating
/// regions with void stiffness disabled).
class IllConditionedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Material {
  double youngs = 1.0;
  double poisson = 0.3;
  double e_min = 1e-9;  // void stiffness; 0 disables it
  double penal = 3.0;

  void validate() const;
  /// Element modulus under the SIMP power law.
  double modulus(double rho) const;
};

struct Support {
  int node = 0;
  bool fix_x = true;
  bool fix_y = true;
};

struct PointLoad {
  int node = 0;
  double fx = 0.0;
  double fy = 0.0;  // positive is up
};

/// Regular grid of nel_x by nel_y unit Q4 elements. Node (ix, iy) has index
/// iy * (nel_x + 1) + ix, with iy = 0 on the top edge; element (ex, ey) covers
/// pixel (ex, ey) of an image whose row 0 is the top.
struct ScenarioSpec {
  int nel_x = 0;
  int nel_y = 0;
  std::vector<Support> supports;
  std::vector<PointLoad> loads;
  double volume_fraction = 0.5;

  int node_count() const { return (nel_x + 1) * (nel_y + 1); }
  int dof_count() const { return 2 * node_count(); }
  int node(int ix, int iy) const { return iy * (nel_x + 1) + ix; }
  int node_x(int n) const { return n % (nel_x + 1); }
  int node_y(int n) const { return n / (nel_x + 1); }

  void validate() const;
  nlohmann::json to_json() const;
  static ScenarioSpec from_json(const nlohmann::json& j);
};

/// Global dofs of element (ex, ey) in the order BL, BR, TR, TL, (x, y) each.
std::array<int, 8> element_dofs(const ScenarioSpec& spec, int ex, int ey);

/// Pixel that a node is rasterized to: the element whose top-left corner it
/// is, clamped to the grid.
std::array<int, 2> node_pixel(const ScenarioSpec& spec, int node);

using Matrix8 = Eigen::Matrix<double, 8, 8>;
using Vector8 = Eigen::Matrix<double, 8, 1>;

/// Bilinear plane-stress element stiffness for a unit square, thickness 1,
/// 2x2 Gauss quadrature. Dof order matches element_dofs.
Matrix8 element_stiffness(const Material& material);

enum class SolverKind { Direct, Pcg };

struct SolverOptions {
  SolverKind kind = SolverKind::Direct;
  double tolerance = 1e-8;  // relative residual ||Ku - f|| / ||f||
  int max_iterations = 0;   // PCG cap; 0 means 10 * free dofs
};

struct FeaResult {
  int nel_x = 0;
  int nel_y = 0;
  std::vector<double> u;  // 2 per node
  std::vector<double> f;  // applied nodal forces, 2 per node
  double compliance = 0.0;
  double residual = 0.0;
  int iterations = 0;
  /// u_e^T k0 u_e per element, with k0 the stiffness at unit modulus.
  Field2D element_energy;
};

/// Reusable system for one scenario: the sparsity pattern and its symbolic
/// factorization are computed once and shared by every density field.
class FeaSystem {
 public:
  FeaSystem(const ScenarioSpec& spec, const Material& material, SolverOptions options = {});
  ~FeaSystem();
  FeaSystem(FeaSystem&&) noexcept;
  FeaSystem& operator=(FeaSystem&&) noexcept;

  const ScenarioSpec& spec() const;
  const Material& material() const;
  FeaResult solve(const Field2D& densities);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

FeaResult assemble_and_solve(const Field2D& densities, const ScenarioSpec& spec, const Material& material,
                             const SolverOptions& options = {});

struct PhysicalFields {
  Field2D von_mises;
  Field2D strain_energy;
};

double von_mises(double sxx, double syy, double sxy);

/// Centroid stress and strain energy density of every element.
PhysicalFields physical_fields(const FeaResult& result, const Field2D& densities, const Material& material);

/// K(rho) u - f per dof. At supports this is the reaction force.
std::vector<double> nodal_residual(const FeaResult& result, const Field2D& densities, const Material& material);

inline constexpr int kConditioningChannels = 6;

enum Channel : int {
  kVolumeFraction = 0,
  kVonMises = 1,
  kStrainEnergy = 2,
  kLoadX = 3,
  kLoadY = 4,
  kSupportMask = 5,
};

struct ConditioningStack {
  std::array<Field2D, kConditioningChannels> channels;

  int width() const { return channels[0].nx; }
  int height() const { return channels[0].ny; }
  /// Channel-major float copy, [6, H, W].
  std::vector<float> to_floats() const;
};

struct ConditioningOptions {
  bool normalize = true;
  SolverOptions solver{};
};

/// FEA on the uniform field rho = vf, rasterized into six channels.
ConditioningStack build_conditioning(const ScenarioSpec& spec, const Material& material,
                                     const ConditioningOptions& options = {});

/// Value at quantile q of the data, using the ceil(q * n) - 1 order statistic.
double percentile(std::vector<double> data, double q);

}  // namespace topo::fea

#include "topo/fea/fea.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

namespace topo::fea {

namespace {

using SpMat = Eigen::SparseMatrix<double>;
using Vec = Eigen::VectorXd;

constexpr std::array<double, 4> kXi{-1.0, 1.0, 1.0, -1.0};
constexpr std::array<double, 4> kEta{-1.0, -1.0, 1.0, 1.0};

// Plane-stress constitutive matrix at unit modulus.
Eigen::Matrix3d unit_constitutive(double nu) {
  Eigen::Matrix3d d;
  d << 1.0, nu, 0.0, nu, 1.0, 0.0, 0.0, 0.0, (1.0 - nu) / 2.0;
  return d / (1.0 - nu * nu);
}

// Strain-displacement matrix of the unit square at natural coordinates (xi, eta).
Eigen::Matrix<double, 3, 8> strain_displacement(double xi, double eta) {
  Eigen::Matrix<double, 3, 8> b = Eigen::Matrix<double, 3, 8>::Zero();
  for (int i = 0; i < 4; ++i) {
    // d/dx = 2 d/dxi on a unit element.
    const double dx = 0.5 * kXi[i] * (1.0 + eta * kEta[i]);
    const double dy = 0.5 * kEta[i] * (1.0 + xi * kXi[i]);
    b(0, 2 * i) = dx;
    b(1, 2 * i + 1) = dy;
    b(2, 2 * i) = dy;
    b(2, 2 * i + 1) = dx;
  }
  return b;
}

Matrix8 unit_element_stiffness(double nu) {
  const Eigen::Matrix3d d = unit_constitutive(nu);
  const double g = 1.0 / std::sqrt(3.0);
  Matrix8 k = Matrix8::Zero();
  for (double xi : {-g, g}) {
    for (double eta : {-g, g}) {
      const auto b = strain_displacement(xi, eta);
      k += 0.25 * b.transpose() * d * b;  // det J = 1/4, weights 1
    }
  }
  return 0.5 * (k + k.transpose());
}

Vector8 gather(const std::vector<double>& u, const std::array<int, 8>& dofs) {
  Vector8 ue;
  for (int i = 0; i < 8; ++i) ue[i] = u[dofs[i]];
  return ue;
}

void check_densities(const Field2D& rho, const ScenarioSpec& spec) {
  if (rho.nx != spec.nel_x || rho.ny != spec.nel_y) {
    throw std::invalid_argument("density field is " + std::to_string(rho.nx) + "x" + std::to_string(rho.ny) +
                                ", grid is " + std::to_string(spec.nel_x) + "x" + std::to_string(spec.nel_y));
  }
  for (double r : rho.v) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("densities must lie in [0, 1]");
  }
}

}  // namespace

void Material::validate() const {
  if (!(youngs > 0.0)) throw std::invalid_argument("Young's modulus must be positive");
  if (!(poisson > 0.0 && poisson < 0.5)) throw std::invalid_argument("Poisson ratio must lie in (0, 0.5)");
  if (!(e_min >= 0.0 && e_min < youngs)) throw std::invalid_argument("E_min must lie in [0, E)");
  if (!(penal >= 1.0)) throw std::invalid_argument("penalization must be >= 1");
}

double Material::modulus(double rho) const { return e_min + std::pow(rho, penal) * (youngs - e_min); }

std::array<int, 8> element_dofs(const ScenarioSpec& spec, int ex, int ey) {
  const int bl = spec.node(ex, ey + 1);
  const int br = spec.node(ex + 1, ey + 1);
  const int tr = spec.node(ex + 1, ey);
  const int tl = spec.node(ex, ey);
  return {2 * bl, 2 * bl + 1, 2 * br, 2 * br + 1, 2 * tr, 2 * tr + 1, 2 * tl, 2 * tl + 1};
}

std::array<int, 2> node_pixel(const ScenarioSpec& spec, int node) {
  return {std::min(spec.node_x(node), spec.nel_x - 1), std::min(spec.node_y(node), spec.nel_y - 1)};
}

Matrix8 element_stiffness(const Material& material) {
  material.validate();
  return material.youngs * unit_element_stiffness(material.poisson);
}

double von_mises(double sxx, double syy, double sxy) {
  return std::sqrt(std::max(0.0, sxx * sxx - sxx * syy + syy * syy + 3.0 * sxy * sxy));
}

struct FeaSystem::Impl {
  ScenarioSpec spec;
  Material material;
  SolverOptions options;
  Matrix8 ke;
  std::vector<int> free_index;  // dof -> free row, or -1 when fixed
  std::vector<int> free_dofs;
  std::vector<std::array<int, 64>> slots;  // per element, value index of each (i, j) or -1
  std::vector<double> f;
  Vec f_free;
  SpMat k;
  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  bool analyzed = false;

  void build() {
    spec.validate();
    material.validate();
    ke = unit_element_stiffness(material.poisson);
    const int ndof = spec.dof_count();
    std::vector<char> fixed(ndof, 0);
    for (const auto& s : spec.supports) {
      if (s.fix_x) fixed[2 * s.node] = 1;
      if (s.fix_y) fixed[2 * s.node + 1] = 1;
    }
    free_index.assign(ndof, -1);
    for (int d = 0; d < ndof; ++d) {
      if (!fixed[d]) {
        free_index[d] = static_cast<int>(free_dofs.size());
        free_dofs.push_back(d);
      }
    }
    f.assign(ndof, 0.0);
    for (const auto& l : spec.loads) {
      f[2 * l.node] += l.fx;
      f[2 * l.node + 1] += l.fy;
    }
    const int nfree = static_cast<int>(free_dofs.size());
    f_free.resize(nfree);
    for (int i = 0; i < nfree; ++i) f_free[i] = f[free_dofs[i]];

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(spec.nel_x) * spec.nel_y * 64);
    for (int ey = 0; ey < spec.nel_y; ++ey) {
      for (int ex = 0; ex < spec.nel_x; ++ex) {
        const auto dofs = element_dofs(spec, ex, ey);
        for (int i = 0; i < 8; ++i) {
          for (int j = 0; j < 8; ++j) {
            const int r = free_index[dofs[i]], c = free_index[dofs[j]];
            if (r >= 0 && c >= 0) trip.emplace_back(r, c, 0.0);
          }
        }
      }
    }
    k.resize(nfree, nfree);
    k.setFromTriplets(trip.begin(), trip.end());
    k.makeCompressed();

    slots.resize(static_cast<std::size_t>(spec.nel_x) * spec.nel_y);
    const int* outer = k.outerIndexPtr();
    const int* inner = k.innerIndexPtr();
    for (int ey = 0; ey < spec.nel_y; ++ey) {
      for (int ex = 0; ex < spec.nel_x; ++ex) {
        const auto dofs = element_dofs(spec, ex, ey);
        auto& s = slots[static_cast<std::size_t>(ey) * spec.nel_x + ex];
        for (int i = 0; i < 8; ++i) {
          for (int j = 0; j < 8; ++j) {
            const int r = free_index[dofs[i]], c = free_index[dofs[j]];
            if (r < 0 || c < 0) {
              s[i * 8 + j] = -1;
              continue;
            }
            const int* pos = std::lower_bound(inner + outer[c], inner + outer[c + 1], r);
            s[i * 8 + j] = static_cast<int>(pos - inner);
          }
        }
      }
    }
  }

  void assemble(const Field2D& rho) {
    double* val = k.valuePtr();
    std::fill(val, val + k.nonZeros(), 0.0);
    for (std::size_t e = 0; e < slots.size(); ++e) {
      const double m = material.modulus(rho.v[e]);
      const auto& s = slots[e];
      for (int ij = 0; ij < 64; ++ij)
        if (s[ij] >= 0) val[s[ij]] += m * ke(ij / 8, ij % 8);
    }
  }

  double relative_residual(const Vec& x) const {
    const double fn = f_free.norm();
    return fn > 0.0 ? (k * x - f_free).norm() / fn : (k * x).norm();
  }

  Vec solve_direct() {
    if (!analyzed) {
      ldlt.analyzePattern(k);
      analyzed = true;
    }
    ldlt.factorize(k);
    if (ldlt.info() != Eigen::Success) throw IllConditionedError("ill-conditioned system: factorization failed");
    const Vec d = ldlt.vectorD();
    const double dmax = d.cwiseAbs().maxCoeff();
    if (!(d.minCoeff() > 1e-12 * dmax)) {
      throw IllConditionedError("ill-conditioned system: pivot ratio " + std::to_string(d.minCoeff() / dmax));
    }
    Vec x = ldlt.solve(f_free);
    for (int pass = 0; pass < 10 && relative_residual(x) > options.tolerance; ++pass) x += ldlt.solve(f_free - k * x);
    return x;
  }

  Vec solve_pcg(int& iterations) {
    Eigen::ConjugateGradient<SpMat, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
    const int cap = options.max_iterations > 0 ? options.max_iterations : 10 * static_cast<int>(free_dofs.size());
    cg.setTolerance(options.tolerance);
    cg.setMaxIterations(cap);
    cg.compute(k);
    Vec x = cg.solve(f_free);
    iterations = static_cast<int>(cg.iterations());
    // The recursive residual can drift from the true one; restart from x.
    while (cg.info() == Eigen::Success && relative_residual(x) > options.tolerance && iterations < cap) {
      cg.setMaxIterations(cap - iterations);
      x = cg.solveWithGuess(f_free, x);
      iterations += static_cast<int>(cg.iterations());
    }
    if (relative_residual(x) > options.tolerance) {
      throw NonConvergenceError("PCG did not reach tolerance in " + std::to_string(cap) + " iterations");
    }
    return x;
  }

  FeaResult solve(const Field2D& rho) {
    check_densities(rho, spec);
    assemble(rho);
    const int nfree = static_cast<int>(free_dofs.size());
    for (int i = 0; i < nfree; ++i) {
      if (!(k.coeff(i, i) > 0.0)) throw IllConditionedError("ill-conditioned system: zero stiffness on a free dof");
    }
    FeaResult res;
    res.nel_x = spec.nel_x;
    res.nel_y = spec.nel_y;
    res.f = f;
    res.u.assign(f.size(), 0.0);
    Vec x = Vec::Zero(nfree);
    if (f_free.norm() > 0.0) {
      if (options.kind == SolverKind::Direct) {
        x = solve_direct();
      } else {
        x = solve_pcg(res.iterations);
      }
    }
    if (!x.allFinite()) throw IllConditionedError("ill-conditioned system: non-finite displacements");
    res.residual = relative_residual(x);
    if (res.residual > options.tolerance) {
      throw IllConditionedError("ill-conditioned system: residual " + std::to_string(res.residual));
    }
    for (int i = 0; i < nfree; ++i) res.u[free_dofs[i]] = x[i];
    double c = 0.0;
    for (std::size_t d = 0; d < f.size(); ++d) c += f[d] * res.u[d];
    res.compliance = c;
    res.element_energy = Field2D(spec.nel_x, spec.nel_y);
    for (int ey = 0; ey < spec.nel_y; ++ey) {
      for (int ex = 0; ex < spec.nel_x; ++ex) {
        const Vector8 ue = gather(res.u, element_dofs(spec, ex, ey));
        res.element_energy(ex, ey) = ue.dot(ke * ue);
      }
    }
    return res;
  }
};

FeaSystem::FeaSystem(const ScenarioSpec& spec, const Material& material, SolverOptions options)
    : impl_(std::make_unique<Impl>()) {
  impl_->spec = spec;
  impl_->material = material;
  impl_->options = options;
  impl_->build();
}

FeaSystem::~FeaSystem() = default;
FeaSystem::FeaSystem(FeaSystem&&) noexcept = default;
FeaSystem& FeaSystem::operator=(FeaSystem&&) noexcept = default;

const ScenarioSpec& FeaSystem::spec() const { return impl_->spec; }
const Material& FeaSystem::material() const { return impl_->material; }
FeaResult FeaSystem::solve(const Field2D& densities) { return impl_->solve(densities); }

FeaResult assemble_and_solve(const Field2D& densities, const ScenarioSpec& spec, const Material& material,
                             const SolverOptions& options) {
  FeaSystem system(spec, material, options);
  return system.solve(densities);
}

PhysicalFields physical_fields(const FeaResult& result, const Field2D& densities, const Material& material) {
  if (densities.nx != result.nel_x || densities.ny != result.nel_y) {
    throw std::invalid_argument("physical_fields: density grid does not match result");
  }
  ScenarioSpec grid;
  grid.nel_x = result.nel_x;
  grid.nel_y = result.nel_y;
  const Eigen::Matrix3d d = unit_constitutive(material.poisson);
  const auto b = strain_displacement(0.0, 0.0);
  PhysicalFields out{Field2D(result.nel_x, result.nel_y), Field2D(result.nel_x, result.nel_y)};
  for (int ey = 0; ey < result.nel_y; ++ey) {
    for (int ex = 0; ex < result.nel_x; ++ex) {
      const Vector8 ue = gather(result.u, element_dofs(grid, ex, ey));
      const Eigen::Vector3d eps = b * ue;
      const Eigen::Vector3d sig = material.modulus(densities(ex, ey)) * (d * eps);
      out.von_mises(ex, ey) = von_mises(sig[0], sig[1], sig[2]);
      out.strain_energy(ex, ey) = std::max(0.0, 0.5 * eps.dot(sig));
    }
  }
  return out;
}

std::vector<double> nodal_residual(const FeaResult& result, const Field2D& densities, const Material& material) {
  ScenarioSpec grid;
  grid.nel_x = result.nel_x;
  grid.nel_y = result.nel_y;
  const Matrix8 ke = unit_element_stiffness(material.poisson);
  std::vector<double> r(result.u.size(), 0.0);
  for (int ey = 0; ey < result.nel_y; ++ey) {
    for (int ex = 0; ex < result.nel_x; ++ex) {
      const auto dofs = element_dofs(grid, ex, ey);
      const Vector8 fe = material.modulus(densities(ex, ey)) * (ke * gather(result.u, dofs));
      for (int i = 0; i < 8; ++i) r[dofs[i]] += fe[i];
    }
  }
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= result.f[i];
  return r;
}

}  // namespace topo::fea

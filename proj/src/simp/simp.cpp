#include "topo/simp/simp.hpp"

#include <algorithm>
#include <cmath>

namespace topo::simp {

void SimpOptions::validate() const {
  if (max_iterations < 1) throw std::invalid_argument("SIMP max_iterations must be positive");
  if (!(move > 0.0 && move < 1.0)) throw std::invalid_argument("SIMP move limit must lie in (0, 1)");
  if (!(damping > 0.0)) throw std::invalid_argument("SIMP damping must be positive");
  if (!(r_min > 0.0)) throw std::invalid_argument("SIMP filter radius must be positive");
  if (!(change_tol > 0.0)) throw std::invalid_argument("SIMP change tolerance must be positive");
}

nlohmann::json SimpOptions::to_json() const {
  return {{"max_iterations", max_iterations}, {"move", move}, {"damping", damping}, {"r_min", r_min},
          {"change_tol", change_tol}};
}

SimpOptions SimpOptions::from_json(const nlohmann::json& j) {
  SimpOptions o;
  o.max_iterations = j.value("max_iterations", o.max_iterations);
  o.move = j.value("move", o.move);
  o.damping = j.value("damping", o.damping);
  o.r_min = j.value("r_min", o.r_min);
  o.change_tol = j.value("change_tol", o.change_tol);
  o.validate();
  return o;
}

fea::Field2D compliance_sensitivity(const fea::Field2D& densities, const fea::FeaResult& fea,
                                    const fea::Material& material) {
  fea::Field2D out(densities.nx, densities.ny);
  const double scale = material.penal * (material.youngs - material.e_min);
  for (std::size_t e = 0; e < out.size(); ++e) {
    out[e] = -scale * std::pow(densities[e], material.penal - 1.0) * fea.element_energy[e];
  }
  return out;
}

fea::Field2D filter_sensitivities(const fea::Field2D& sens, const fea::Field2D& densities, double r_min) {
  if (r_min <= 1.0) return sens;
  const int nx = sens.nx, ny = sens.ny;
  const int reach = static_cast<int>(std::ceil(r_min)) - 1;
  fea::Field2D out(nx, ny);
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double num = 0.0, wsum = 0.0;
      for (int yy = std::max(0, y - reach); yy <= std::min(ny - 1, y + reach); ++yy) {
        for (int xx = std::max(0, x - reach); xx <= std::min(nx - 1, x + reach); ++xx) {
          const double w = std::max(0.0, r_min - std::hypot(x - xx, y - yy));
          num += w * densities(xx, yy) * sens(xx, yy);
          wsum += w;
        }
      }
      out(x, y) = num / (std::max(1e-3, densities(x, y)) * wsum);
    }
  }
  return out;
}

fea::Field2D oc_update(const fea::Field2D& densities, const fea::Field2D& sens, double vf, const SimpOptions& options) {
  double smax = 0.0;
  for (double s : sens.v) {
    if (s > 0.0 || !std::isfinite(s)) throw std::invalid_argument("OC update needs finite non-positive sensitivities");
    smax = std::max(smax, -s);
  }
  fea::Field2D out(densities.nx, densities.ny);
  auto apply = [&](double lambda) {
    double total = 0.0;
    for (std::size_t e = 0; e < out.size(); ++e) {
      const double x = densities[e];
      const double lo = std::max(0.0, x - options.move), hi = std::min(1.0, x + options.move);
      const double cand = x * std::pow(-sens[e] / lambda, options.damping);
      out[e] = std::clamp(cand, lo, hi);
      total += out[e];
    }
    return total / static_cast<double>(out.size());
  };
  if (smax == 0.0) throw OcBracketError("OC bisection cannot bracket the volume multiplier: all sensitivities are zero");
  double l1 = 0.0, l2 = 1e9 * smax;
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (l1 + l2);
    if (mid <= l1 || mid >= l2) break;
    const double vol = apply(mid);
    if (std::fabs(vol - vf) <= 1e-7) return out;
    if (vol > vf) l1 = mid;
    else l2 = mid;
  }
  const double vol = apply(0.5 * (l1 + l2));
  if (std::fabs(vol - vf) > 1e-6) {
    throw OcBracketError("OC bisection cannot bracket the volume multiplier (volume " + std::to_string(vol) +
                         ", target " + std::to_string(vf) + ")");
  }
  return out;
}

fea::Field2D threshold(const fea::Field2D& density, double level) {
  fea::Field2D out(density.nx, density.ny);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = density[i] >= level ? 1.0 : 0.0;
  return out;
}

SimpResult optimize(const fea::ScenarioSpec& spec, const SimpOptions& options, const fea::Material& material) {
  options.validate();
  fea::FeaSystem system(spec, material);
  SimpResult r;
  fea::Field2D x(spec.nel_x, spec.nel_y, spec.volume_fraction);
  for (int it = 0; it < options.max_iterations; ++it) {
    const fea::FeaResult res = system.solve(x);
    if (it == 0) r.initial_compliance = res.compliance;
    r.history.push_back(res.compliance);
    const fea::Field2D dc = filter_sensitivities(compliance_sensitivity(x, res, material), x, options.r_min);
    fea::Field2D next = oc_update(x, dc, spec.volume_fraction, options);
    double change = 0.0;
    for (std::size_t e = 0; e < x.size(); ++e) change = std::max(change, std::fabs(next[e] - x[e]));
    x = std::move(next);
    r.volume_history.push_back(x.mean());
    r.iterations = it + 1;
    if (change < options.change_tol) {
      r.converged = true;
      break;
    }
  }
  r.compliance = system.solve(x).compliance;
  r.binary = threshold(x);
  r.density = std::move(x);
  r.binary_compliance = system.solve(r.binary).compliance;
  return r;
}

}  // namespace topo::simp

#include <algorithm>
#include <cmath>

#include "topo/fea/fea.hpp"

namespace topo::fea {

double percentile(std::vector<double> data, double q) {
  if (data.empty()) return 0.0;
  const auto n = data.size();
  auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 1, n) - 1;
  std::nth_element(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(k), data.end());
  return data[k];
}

std::vector<float> ConditioningStack::to_floats() const {
  std::vector<float> out;
  out.reserve(kConditioningChannels * channels[0].size());
  for (const auto& c : channels)
    for (double v : c.v) out.push_back(static_cast<float>(v));
  return out;
}

ConditioningStack build_conditioning(const ScenarioSpec& spec, const Material& material,
                                     const ConditioningOptions& options) {
  spec.validate();
  const Field2D uniform(spec.nel_x, spec.nel_y, spec.volume_fraction);
  const FeaResult res = assemble_and_solve(uniform, spec, material, options.solver);
  PhysicalFields pf = physical_fields(res, uniform, material);

  ConditioningStack stack;
  stack.channels[kVolumeFraction] = uniform;
  stack.channels[kVonMises] = std::move(pf.von_mises);
  stack.channels[kStrainEnergy] = std::move(pf.strain_energy);
  Field2D& lx = stack.channels[kLoadX] = Field2D(spec.nel_x, spec.nel_y);
  Field2D& ly = stack.channels[kLoadY] = Field2D(spec.nel_x, spec.nel_y);
  double max_load = 0.0;
  for (const auto& l : spec.loads) {
    const auto [px, py] = node_pixel(spec, l.node);
    lx(px, py) += l.fx;
    ly(px, py) += l.fy;
    max_load = std::max(max_load, std::hypot(l.fx, l.fy));
  }
  // Support flags per pixel: bit 0 = x fixed, bit 1 = y fixed.
  std::vector<unsigned char> flags(uniform.size(), 0);
  for (const auto& s : spec.supports) {
    const auto [px, py] = node_pixel(spec, s.node);
    flags[static_cast<std::size_t>(py) * spec.nel_x + px] |= (s.fix_x ? 1 : 0) | (s.fix_y ? 2 : 0);
  }
  Field2D& mask = stack.channels[kSupportMask] = Field2D(spec.nel_x, spec.nel_y);
  for (std::size_t i = 0; i < flags.size(); ++i) mask[i] = flags[i] == 3 ? 1.0 : (flags[i] ? 0.5 : 0.0);

  if (options.normalize) {
    for (int c : {kVonMises, kStrainEnergy}) {
      const double p99 = percentile(stack.channels[c].v, 0.99);
      if (p99 > 0.0)
        for (double& v : stack.channels[c].v) v /= p99;
    }
    if (max_load > 0.0) {
      for (double& v : lx.v) v /= max_load;
      for (double& v : ly.v) v /= max_load;
    }
  }
  return stack;
}

}  // namespace topo::fea

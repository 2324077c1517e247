#pragma once

#include "topo/autodiff/tensor.hpp"
#include "topo/fea/fea.hpp"
#include "topo/io/png.hpp"

namespace topo::pipeline {

/// One pixel per element, material dark: gray = 255 (1 - rho).
io::Image render_topology(const fea::Field2D& density);

/// RGB composite at `scale` pixels per element: strain-energy heat map from
/// the [6,H,W] conditioning, supports as green squares at their nodes and
/// loads as red arrows pointing at the loaded node.
io::Image render_conditions(const fea::ScenarioSpec& spec, const ad::Tensor& cond, int scale = 8);

}  // namespace topo::pipeline

#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "topo/fea/fea.hpp"
#include "topo/fea/field.hpp"

namespace topo::rewards {

struct ComponentLabels {
  int nx = 0;
  int ny = 0;
  std::vector<int> labels;  // 0 on void, 1..count on material, in raster discovery order
  int count = 0;

  int operator()(int x, int y) const { return labels[static_cast<std::size_t>(y) * nx + x]; }
};

/// Flood-fill labeling of pixels with value >= 0.5. Connectivity is 4 or 8.
ComponentLabels connected_components(const fea::Field2D& grid, int connectivity = 4);

struct ValidityVerdict {
  bool bc_valid = false;
  bool fm_valid = false;
  int component_count = 0;
  std::vector<int> detached_supports;  // support nodes in clusters with no adjacent material
  std::vector<int> unreached_loads;    // load nodes with no adjacent material
  std::vector<int> floating_components;  // component labels that touch no support

  nlohmann::json to_json() const;
};

/// Geometric validity of a thresholded topology. A node is touched when any
/// pixel within Chebyshev distance 1 of it (its up to four incident pixels) is
/// material. bc_valid: every load node is touched, and every cluster of
/// 8-adjacent support nodes is touched somewhere. fm_valid: every material
/// component touches a support, so nothing is isolated and every loaded
/// component is connected to a support. Components are 8-connected: pixels
/// meeting at a corner share a mesh node.
ValidityVerdict oracle_verdict(const fea::Field2D& topology, const fea::ScenarioSpec& spec);

/// Picks n of the pooled designs for labeling, the way an annotator flags
/// defects: violations fill up to half of the picks (fm first, being rarer,
/// up to a quarter), valid designs fill the rest. Returns ascending pool
/// indices; throws if the pool is smaller than n.
std::vector<std::size_t> select_for_labeling(const std::vector<ValidityVerdict>& pool, int n);

}  // namespace topo::rewards

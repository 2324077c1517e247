#include "topo/rewards/oracle.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace topo::rewards {

namespace {

// Calls fn(px, py) for each in-grid pixel incident to node (ix, iy).
template <class Fn>
void for_incident_pixels(int nx, int ny, int ix, int iy, Fn fn) {
  for (int py = iy - 1; py <= iy; ++py)
    for (int px = ix - 1; px <= ix; ++px)
      if (px >= 0 && py >= 0 && px < nx && py < ny) fn(px, py);
}

}  // namespace

ComponentLabels connected_components(const fea::Field2D& grid, int connectivity) {
  if (connectivity != 4 && connectivity != 8) throw std::invalid_argument("connectivity must be 4 or 8");
  ComponentLabels out;
  out.nx = grid.nx;
  out.ny = grid.ny;
  out.labels.assign(grid.size(), 0);
  std::vector<int> stack;
  for (int y = 0; y < grid.ny; ++y) {
    for (int x = 0; x < grid.nx; ++x) {
      const std::size_t seed = static_cast<std::size_t>(y) * grid.nx + x;
      if (grid[seed] < 0.5 || out.labels[seed] != 0) continue;
      const int label = ++out.count;
      out.labels[seed] = label;
      stack.assign(1, static_cast<int>(seed));
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int px = p % grid.nx, py = p / grid.nx;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if ((dx == 0 && dy == 0) || (connectivity == 4 && dx != 0 && dy != 0)) continue;
            const int qx = px + dx, qy = py + dy;
            if (qx < 0 || qy < 0 || qx >= grid.nx || qy >= grid.ny) continue;
            const std::size_t q = static_cast<std::size_t>(qy) * grid.nx + qx;
            if (grid[q] >= 0.5 && out.labels[q] == 0) {
              out.labels[q] = label;
              stack.push_back(static_cast<int>(q));
            }
          }
        }
      }
    }
  }
  return out;
}

nlohmann::json ValidityVerdict::to_json() const {
  return {{"bc_valid", bc_valid},
          {"fm_valid", fm_valid},
          {"component_count", component_count},
          {"detached_supports", detached_supports},
          {"unreached_loads", unreached_loads},
          {"floating_components", floating_components}};
}

ValidityVerdict oracle_verdict(const fea::Field2D& topology, const fea::ScenarioSpec& spec) {
  if (topology.nx != spec.nel_x || topology.ny != spec.nel_y) {
    throw std::invalid_argument("oracle_verdict: topology does not match the scenario grid");
  }
  const int nx = spec.nel_x, ny = spec.nel_y;
  // Elements that share only a corner share an FE node and carry load across it.
  const ComponentLabels comp = connected_components(topology, 8);
  auto touched = [&](int node) {
    bool hit = false;
    for_incident_pixels(nx, ny, spec.node_x(node), spec.node_y(node),
                        [&](int px, int py) { hit = hit || topology(px, py) >= 0.5; });
    return hit;
  };

  ValidityVerdict v;
  v.component_count = comp.count;

  // Support clusters: 8-adjacent support nodes on the node lattice.
  const int nnx = nx + 1;
  std::vector<int> cluster(static_cast<std::size_t>(spec.node_count()), -1);
  std::vector<char> is_support(cluster.size(), 0);
  for (const auto& s : spec.supports) is_support[s.node] = 1;
  int clusters = 0;
  for (std::size_t n = 0; n < cluster.size(); ++n) {
    if (!is_support[n] || cluster[n] >= 0) continue;
    std::vector<int> stack{static_cast<int>(n)};
    cluster[n] = clusters;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int qx = p % nnx + dx, qy = p / nnx + dy;
          if (qx < 0 || qy < 0 || qx > nx || qy > ny) continue;
          const int q = qy * nnx + qx;
          if (is_support[q] && cluster[q] < 0) {
            cluster[q] = clusters;
            stack.push_back(q);
          }
        }
      }
    }
    ++clusters;
  }
  std::vector<char> cluster_attached(static_cast<std::size_t>(clusters), 0);
  for (std::size_t n = 0; n < cluster.size(); ++n)
    if (cluster[n] >= 0 && touched(static_cast<int>(n))) cluster_attached[cluster[n]] = 1;
  for (std::size_t n = 0; n < cluster.size(); ++n)
    if (cluster[n] >= 0 && !cluster_attached[cluster[n]]) v.detached_supports.push_back(static_cast<int>(n));
  for (const auto& l : spec.loads) {
    if (!touched(l.node) &&
        std::find(v.unreached_loads.begin(), v.unreached_loads.end(), l.node) == v.unreached_loads.end()) {
      v.unreached_loads.push_back(l.node);
    }
  }
  v.bc_valid = v.detached_supports.empty() && v.unreached_loads.empty();

  std::vector<char> supported(static_cast<std::size_t>(comp.count) + 1, 0);
  for (std::size_t n = 0; n < cluster.size(); ++n) {
    if (!is_support[n]) continue;
    for_incident_pixels(nx, ny, static_cast<int>(n) % nnx, static_cast<int>(n) / nnx,
                        [&](int px, int py) { supported[comp(px, py)] = 1; });
  }
  for (int c = 1; c <= comp.count; ++c)
    if (!supported[c]) v.floating_components.push_back(c);
  v.fm_valid = v.floating_components.empty();
  return v;
}

std::vector<std::size_t> select_for_labeling(const std::vector<ValidityVerdict>& pool, int n) {
  if (n < 0 || static_cast<std::size_t>(n) > pool.size()) {
    throw std::invalid_argument("cannot pick " + std::to_string(n) + " of " + std::to_string(pool.size()) + " designs");
  }
  std::vector<std::size_t> fm_bad, bc_bad, valid;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!pool[i].fm_valid) fm_bad.push_back(i);
    else if (!pool[i].bc_valid) bc_bad.push_back(i);
    else valid.push_back(i);
  }
  const std::size_t budget = static_cast<std::size_t>(n);
  std::vector<std::size_t> out;
  const auto take = [&](std::vector<std::size_t>& from, std::size_t upto) {
    std::size_t k = 0;
    while (k < from.size() && out.size() < upto) out.push_back(from[k++]);
    from.erase(from.begin(), from.begin() + static_cast<std::ptrdiff_t>(k));
  };
  take(fm_bad, budget / 4);
  take(bc_bad, budget / 2);
  take(fm_bad, budget / 2);
  take(valid, budget);
  // Short of valid designs: the remaining violations make up the count.
  take(bc_bad, budget);
  take(fm_bad, budget);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace topo::rewards

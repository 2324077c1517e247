#include <cmath>
#include <string>

#include "topo/fea/fea.hpp"

namespace topo::fea {

void ScenarioSpec::validate() const {
  if (nel_x < 1 || nel_y < 1) throw ScenarioError("grid must have at least one element per axis");
  const int nodes = node_count();
  std::vector<unsigned char> fix(nodes, 0);
  bool anchored = false;
  for (const auto& s : supports) {
    if (s.node < 0 || s.node >= nodes) throw ScenarioError("support node " + std::to_string(s.node) + " out of range");
    fix[s.node] |= (s.fix_x ? 1 : 0) | (s.fix_y ? 2 : 0);
    anchored = anchored || fix[s.node] == 3;
  }
  if (!anchored) throw ScenarioError("scenario needs at least one fully constrained node");
  bool loaded = false;
  for (const auto& l : loads) {
    if (l.node < 0 || l.node >= nodes) throw ScenarioError("load node " + std::to_string(l.node) + " out of range");
    if (!std::isfinite(l.fx) || !std::isfinite(l.fy)) throw ScenarioError("load components must be finite");
    loaded = loaded || l.fx != 0.0 || l.fy != 0.0;
  }
  for (const auto& l : loads) {
    if (fix[l.node] == 3) throw ScenarioError("load node " + std::to_string(l.node) + " is fully fixed");
  }
  if (!loaded) throw ScenarioError("scenario needs at least one nonzero load");
  if (!(volume_fraction > 0.0 && volume_fraction < 1.0)) throw ScenarioError("volume fraction must lie in (0, 1)");
}

nlohmann::json ScenarioSpec::to_json() const {
  nlohmann::json s = nlohmann::json::array();
  for (const auto& x : supports) s.push_back({{"node", x.node}, {"fix_x", x.fix_x}, {"fix_y", x.fix_y}});
  nlohmann::json l = nlohmann::json::array();
  for (const auto& x : loads) l.push_back({{"node", x.node}, {"fx", x.fx}, {"fy", x.fy}});
  return {{"nel_x", nel_x}, {"nel_y", nel_y}, {"supports", s}, {"loads", l}, {"volume_fraction", volume_fraction}};
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  ScenarioSpec spec;
  try {
    spec.nel_x = j.at("nel_x").get<int>();
    spec.nel_y = j.at("nel_y").get<int>();
    for (const auto& s : j.at("supports")) {
      spec.supports.push_back({s.at("node").get<int>(), s.value("fix_x", true), s.value("fix_y", true)});
    }
    for (const auto& l : j.at("loads")) {
      spec.loads.push_back({l.at("node").get<int>(), l.value("fx", 0.0), l.value("fy", 0.0)});
    }
    spec.volume_fraction = j.at("volume_fraction").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ScenarioError(std::string("malformed scenario JSON: ") + e.what());
  }
  spec.validate();
  return spec;
}

}  // namespace topo::fea

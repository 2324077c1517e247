#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/fea/fea.hpp"
#include "topo/simp/simp.hpp"

namespace topo::simp {

enum class SupportTemplate { LeftEdge, BottomCorners, LeftEdgeBottomRight };

std::string to_string(SupportTemplate t);
SupportTemplate support_template_from_string(const std::string& s);

/// Supports for a template on an nel_x by nel_y grid. LeftEdge clamps every
/// left-edge node; BottomCorners clamps both bottom corners; LeftEdgeBottomRight
/// clamps the left edge and the bottom-right corner.
std::vector<fea::Support> template_supports(SupportTemplate t, int nel_x, int nel_y);

/// Boundary nodes that carry no support, in ascending order.
std::vector<int> free_boundary_nodes(int nel_x, int nel_y, const std::vector<fea::Support>& supports);

struct ScenarioDraw {
  fea::ScenarioSpec spec;
  SupportTemplate support = SupportTemplate::LeftEdge;
};

struct ScenarioOptions {
  int nel_x = 32;
  int nel_y = 32;
  double vf_min = 0.3;
  double vf_max = 0.5;
  std::vector<SupportTemplate> templates{SupportTemplate::LeftEdge, SupportTemplate::BottomCorners,
                                         SupportTemplate::LeftEdgeBottomRight};
};

/// One or two unit loads on distinct free boundary nodes, direction uniform on
/// the circle, vf uniform in [vf_min, vf_max].
ScenarioDraw random_scenario(std::mt19937_64& rng, const ScenarioOptions& options = {});

struct DatasetRecord {
  fea::ScenarioSpec spec;
  SupportTemplate support = SupportTemplate::LeftEdge;
  fea::ConditioningStack conditioning;
  fea::Field2D density;
  fea::Field2D binary;
  double compliance = 0.0;
  double binary_compliance = 0.0;
  int iterations = 0;
  std::uint64_t seed = 0;
  std::string split = "train";  // "train" or "ood"
};

struct DatasetOptions {
  ScenarioOptions scenario;
  SimpOptions simp;
  fea::Material material;
  /// Records drawn from this template are labeled "ood". Callers build the
  /// training split by leaving it out of scenario.templates.
  SupportTemplate holdout = SupportTemplate::LeftEdgeBottomRight;
  int max_attempts_factor = 10;  // give up after n * factor scenario draws
  double volume_tolerance = 0.005;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetStats {
  int attempts = 0;
  int rejected_unconverged = 0;
  int rejected_oracle = 0;
  int rejected_volume = 0;
  int rejected_fea = 0;
};

/// Draws scenarios from the attempt-indexed seed stream, optimizes each and
/// keeps those that converge, satisfy the volume fraction and pass the
/// geometric oracle.
/// Every template except the holdout.
std::vector<SupportTemplate> training_templates(SupportTemplate holdout);

std::vector<DatasetRecord> generate_dataset(int n, std::uint64_t seed, const DatasetOptions& options,
                                            DatasetStats* stats = nullptr);

/// One TOPOTNSR file per record plus manifest.json.
void write_dataset(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records,
                   const nlohmann::json& provenance = nlohmann::json::object());

std::vector<DatasetRecord> read_dataset(const std::filesystem::path& dir);

}  // namespace topo::simp

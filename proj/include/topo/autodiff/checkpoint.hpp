#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/graph.hpp"

namespace topo::ad {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generic binary container: 8-byte magic, little-endian u32 header length,
/// UTF-8 JSON header, then raw little-endian f32 payload.
struct Container {
  nlohmann::json header;
  std::vector<float> payload;
};

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& c);
Container read_container(const std::filesystem::path& path, std::string_view magic);
std::vector<char> encode_container(std::string_view magic, const Container& c);

inline constexpr std::string_view kCheckpointMagic = "TOPOCKPT";

struct Checkpoint {
  Graph graph;
  ParameterStore params;
  nlohmann::json metadata;
};

/// Header holds the op list, parameter names and shapes (payload order), and
/// caller metadata such as the seed and training statistics.
void write_checkpoint(const std::filesystem::path& path, const Graph& graph, const ParameterStore& params,
                      const nlohmann::json& metadata);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace topo::ad

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "topo/autodiff/tensor.hpp"

namespace topo::io {

inline constexpr std::string_view kTensorMagic = "TOPOTNSR";

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

/// One or more named float32 tensors plus free-form metadata, in the same
/// magic + length + JSON header + f32 payload layout as model checkpoints.
struct TensorFile {
  std::vector<NamedTensor> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const ad::Tensor& get(std::string_view name) const;
};

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace topo::io

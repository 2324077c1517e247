#include "topo/io/tensor_file.hpp"

#include "topo/autodiff/checkpoint.hpp"

namespace topo::io {

const ad::Tensor& TensorFile::get(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw std::invalid_argument("tensor file has no tensor '" + std::string(name) + "'");
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  ad::Container c;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& t : file.tensors) {
    list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
    c.payload.insert(c.payload.end(), t.tensor.storage().begin(), t.tensor.storage().end());
  }
  c.header = {{"format", "TOPOTNSR"}, {"version", 1}, {"dtype", "float32"}, {"tensors", list},
              {"metadata", file.metadata}};
  ad::write_container(path, kTensorMagic, c);
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  ad::Container c = ad::read_container(path, kTensorMagic);
  TensorFile out;
  std::size_t offset = 0;
  try {
    if (c.header.at("dtype") != "float32") throw ad::FormatError(path.string() + ": unsupported dtype");
    for (const auto& t : c.header.at("tensors")) {
      ad::Shape shape = t.at("shape").get<ad::Shape>();
      const std::size_t n = ad::element_count(shape);
      if (offset + n > c.payload.size()) throw ad::FormatError(path.string() + ": payload shorter than header");
      std::vector<float> data(c.payload.begin() + static_cast<std::ptrdiff_t>(offset),
                              c.payload.begin() + static_cast<std::ptrdiff_t>(offset + n));
      out.tensors.push_back({t.at("name").get<std::string>(), ad::Tensor(std::move(shape), std::move(data))});
      offset += n;
    }
    out.metadata = c.header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ad::FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (offset != c.payload.size()) throw ad::FormatError(path.string() + ": payload longer than header");
  return out;
}

}  // namespace topo::io

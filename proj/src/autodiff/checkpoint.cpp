#include "topo/autodiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace topo::ad {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace

std::vector<char> encode_container(std::string_view magic, const Container& c) {
  if (magic.size() != 8) throw std::invalid_argument("container magic must be 8 bytes");
  const std::string header = c.header.dump();
  std::vector<char> out;
  out.reserve(12 + header.size() + 4 * c.payload.size());
  out.insert(out.end(), magic.begin(), magic.end());
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  const auto* bytes = reinterpret_cast<const char*>(c.payload.data());
  out.insert(out.end(), bytes, bytes + 4 * c.payload.size());
  return out;
}

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& c) {
  const auto bytes = encode_container(magic, c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::string_view(bytes.data(), 8) != magic) {
    throw FormatError(path.string() + ": bad magic, expected " + std::string(magic));
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) throw FormatError(path.string() + ": truncated header");
  Container c;
  c.header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  const std::size_t rest = bytes.size() - 12 - len;
  if (rest % 4 != 0) throw FormatError(path.string() + ": payload is not a whole number of f32 values");
  c.payload.resize(rest / 4);
  std::memcpy(c.payload.data(), bytes.data() + 12 + len, rest);
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Graph& graph, const ParameterStore& params,
                      const nlohmann::json& metadata) {
  Container c;
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, t] : params.entries()) {
    plist.push_back({{"name", name}, {"shape", t.shape()}});
    c.payload.insert(c.payload.end(), t.storage().begin(), t.storage().end());
  }
  c.header = {{"format", "TOPOCKPT"}, {"version", 1}, {"graph", graph.to_json()}, {"parameters", plist},
              {"metadata", metadata}};
  write_container(path, kCheckpointMagic, c);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path, kCheckpointMagic);
  Checkpoint ck;
  ck.graph = Graph::from_json(c.header.at("graph"));
  ck.metadata = c.header.value("metadata", nlohmann::json::object());
  std::size_t offset = 0;
  for (const auto& p : c.header.at("parameters")) {
    Shape shape = p.at("shape").get<Shape>();
    const std::size_t n = element_count(shape);
    if (offset + n > c.payload.size()) throw FormatError(path.string() + ": payload shorter than header declares");
    std::vector<float> data(c.payload.begin() + offset, c.payload.begin() + offset + n);
    ck.params.add(p.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    offset += n;
  }
  if (offset != c.payload.size()) throw FormatError(path.string() + ": trailing payload bytes");
  return ck;
}

}  // namespace topo::ad

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "topo/autodiff/checkpoint.hpp"
#include "topo/io/png.hpp"
#include "topo/io/tensor_file.hpp"

using namespace topo;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "topo_io_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("tensor file round trip keeps names, shapes, values and metadata") {
  io::TensorFile f;
  ad::Tensor a({2, 3});
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = 0.25f * static_cast<float>(i) - 1.0f;
  f.tensors.push_back({"a", a});
  f.tensors.push_back({"b", ad::Tensor({1, 1, 4}, 7.5f)});
  f.metadata = {{"seed", 42}, {"note", "x"}};
  const auto p = scratch("rt.tnsr");
  io::write_tensor_file(p, f);
  const io::TensorFile g = io::read_tensor_file(p);
  REQUIRE(g.tensors.size() == 2);
  CHECK(g.get("a") == a);
  CHECK(g.get("b").shape() == ad::Shape{1, 1, 4});
  CHECK(g.get("b")[3] == 7.5f);
  CHECK(g.metadata == f.metadata);
  CHECK_THROWS_AS(g.get("missing"), std::invalid_argument);

  std::ifstream is(p, std::ios::binary);
  char magic[8];
  is.read(magic, 8);
  CHECK(std::string(magic, 8) == "TOPOTNSR");
}

TEST_CASE("corrupt tensor files are rejected") {
  const auto p = scratch("bad.tnsr");
  {
    std::ofstream os(p, std::ios::binary);
    os << "NOTMAGIC0000";
  }
  CHECK_THROWS_AS(io::read_tensor_file(p), ad::FormatError);

  io::TensorFile f;
  f.tensors.push_back({"a", ad::Tensor({64}, 1.0f)});
  io::write_tensor_file(p, f);
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 16);
  CHECK_THROWS_AS(io::read_tensor_file(p), ad::FormatError);
  CHECK_THROWS(io::read_tensor_file(scratch("does_not_exist.tnsr")));
}

TEST_CASE("png round trip for gray and RGB") {
  for (int channels : {1, 3}) {
    io::Image img(5, 3, channels);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 17 % 256);
    const auto p = scratch("img" + std::to_string(channels) + ".png");
    io::write_png(p, img);
    const io::Image back = io::read_png(p);
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.channels == channels);
    CHECK(back.pixels == img.pixels);
    const auto bytes = io::encode_png(img);
    REQUIRE(bytes.size() > 8);
    CHECK(bytes[1] == 'P');
    CHECK(bytes[2] == 'N');
    CHECK(bytes[3] == 'G');
  }
}

TEST_CASE("invalid images and files are rejected") {
  io::Image bad(2, 2, 2);
  CHECK_THROWS(io::encode_png(bad));
  const auto p = scratch("garbage.png");
  {
    std::ofstream os(p, std::ios::binary);
    os << "not a png at all";
  }
  CHECK_THROWS(io::read_png(p));
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace topo::io {

struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 = gray, 3 = RGB
  std::vector<std::uint8_t> pixels;  // row-major, interleaved

  Image() = default;
  Image(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}
  std::uint8_t* at(int x, int y) { return &pixels[(static_cast<std::size_t>(y) * width + x) * channels]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[(static_cast<std::size_t>(y) * width + x) * channels];
  }
};

/// 8-bit PNG. The write is atomic (temporary file + rename).
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);
Image read_png(const std::filesystem::path& path);

}  // namespace topo::io

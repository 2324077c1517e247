#include "topo/pipeline/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace topo::pipeline {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void put(io::Image& img, int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  auto* p = img.at(x, y);
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void line(io::Image& img, double x0, double y0, double x1, double y1, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int steps = std::max(1, static_cast<int>(std::ceil(std::hypot(x1 - x0, y1 - y0) * 2)));
  for (int i = 0; i <= steps; ++i) {
    const double s = static_cast<double>(i) / steps;
    const int x = static_cast<int>(std::lround(x0 + s * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + s * (y1 - y0)));
    for (int dy = -1; dy <= 0; ++dy)
      for (int dx = -1; dx <= 0; ++dx) put(img, x + dx, y + dy, r, g, b);
  }
}

}  // namespace

io::Image render_topology(const fea::Field2D& density) {
  io::Image img(density.nx, density.ny, 1);
  for (int y = 0; y < density.ny; ++y)
    for (int x = 0; x < density.nx; ++x) img.at(x, y)[0] = to_byte(1.0 - density(x, y));
  return img;
}

io::Image render_conditions(const fea::ScenarioSpec& spec, const ad::Tensor& cond, int scale) {
  if (cond.rank() != 3 || cond.dim(0) != fea::kConditioningChannels || cond.dim(1) != spec.nel_y ||
      cond.dim(2) != spec.nel_x) {
    throw std::invalid_argument("conditioning must be [6, nel_y, nel_x]");
  }
  const int w = spec.nel_x * scale, h = spec.nel_y * scale;
  io::Image img(w, h, 3);
  const std::size_t plane = static_cast<std::size_t>(spec.nel_x) * spec.nel_y;
  const auto se = [&](int x, int y) {
    return static_cast<double>(cond[fea::kStrainEnergy * plane + static_cast<std::size_t>(y) * spec.nel_x + x]);
  };
  double top = 0.0;
  for (std::size_t i = 0; i < plane; ++i) top = std::max(top, static_cast<double>(cond[fea::kStrainEnergy * plane + i]));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Square root spreads the heavy-tailed energy over the ramp.
      const double v = top > 0.0 ? std::sqrt(std::max(0.0, se(x / scale, y / scale)) / top) : 0.0;
      put(img, x, y, to_byte(0.25 + 0.75 * v), to_byte(0.25 + 0.5 * v * (1 - v)), to_byte(0.6 * (1 - v) + 0.1));
    }
  }
  const int half = std::max(1, scale / 3);
  for (const auto& s : spec.supports) {
    const int cx = spec.node_x(s.node) * scale, cy = spec.node_y(s.node) * scale;
    const bool full = s.fix_x && s.fix_y;
    for (int dy = -half; dy <= half; ++dy)
      for (int dx = -half; dx <= half; ++dx) put(img, cx + dx, cy + dy, 0, full ? 220 : 140, 0);
  }
  for (const auto& l : spec.loads) {
    const double n = std::hypot(l.fx, l.fy);
    if (n == 0.0) continue;
    // Image y grows downward while fy > 0 points up.
    const double ux = l.fx / n, uy = -l.fy / n;
    const double len = 3.0 * scale;
    const double tx = spec.node_x(l.node) * scale, ty = spec.node_y(l.node) * scale;
    const double sx = tx - ux * len, sy = ty - uy * len;
    line(img, sx, sy, tx, ty, 255, 40, 40);
    const double head = 1.2 * scale;
    for (double a : {2.6, -2.6}) {
      const double c = std::cos(a), s = std::sin(a);
      line(img, tx, ty, tx + head * (c * ux - s * uy), ty + head * (s * ux + c * uy), 255, 40, 40);
    }
  }
  return img;
}

}  // namespace topo::pipeline

#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace topo::fea {

/// Row-major nx-by-ny grid of doubles. Row iy = 0 is the top of the image.
struct Field2D {
  int nx = 0;
  int ny = 0;
  std::vector<double> v;

  Field2D() = default;
  Field2D(int nx_, int ny_, double fill = 0.0) : nx(nx_), ny(ny_), v(static_cast<std::size_t>(nx_) * ny_, fill) {
    if (nx_ < 0 || ny_ < 0) throw std::invalid_argument("Field2D: negative dimension");
  }

  std::size_t size() const { return v.size(); }
  double& operator()(int ix, int iy) { return v[static_cast<std::size_t>(iy) * nx + ix]; }
  double operator()(int ix, int iy) const { return v[static_cast<std::size_t>(iy) * nx + ix]; }
  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  double mean() const {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  friend bool operator==(const Field2D& a, const Field2D& b) { return a.nx == b.nx && a.ny == b.ny && a.v == b.v; }
};

}  // namespace topo::fea

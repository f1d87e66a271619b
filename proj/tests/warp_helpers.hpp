#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "pnet/hyper.hpp"

namespace testing {

// Warp source coordinates of every output pixel, as the warp computes them.
inline std::vector<double> source_coords(const pnet::Affine& a, std::size_t h, std::size_t w) {
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  std::vector<double> out;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double xj = j - cx, yi = i - cy;
      out.push_back(cx + a[0] * xj + a[1] * yi * (cx / cy) + a[2] * cx);
      out.push_back(cy + a[3] * xj * (cy / cx) + a[4] * yi + a[5] * cy);
    }
  return out;
}

inline bool near_grid_line(const pnet::Affine& a, std::size_t h, std::size_t w, double gap) {
  for (double c : source_coords(a, h, w))
    if (std::abs(c - std::round(c)) < gap) return true;
  return false;
}

// Noise draws whose warp samples stay away from the bilinear cell edges,
// where the warp is not differentiable.
inline pnet::Tensor smooth_noise(const std::array<pnet::Real, pnet::kAffineParams>& theta, std::size_t n,
                                 std::size_t h, std::size_t w, pnet::Rng& rng) {
  pnet::Tensor eps({n, pnet::kAffineParams});
  for (std::size_t r = 0; r < n; ++r) {
    std::array<pnet::Real, pnet::kAffineParams> e{};
    do {
      for (auto& v : e) v = rng.uniform(-1, 1);
    } while (near_grid_line(pnet::sample_affine(theta, e), h, w, 1e-3));
    for (std::size_t i = 0; i < pnet::kAffineParams; ++i) eps.at(r, i) = e[i];
  }
  return eps;
}

}  // namespace testing

#pragma once

#include <cmath>
#include <random>

#include "afseg/mask.hpp"
#include "afseg/spectral.hpp"

namespace afseg::testing {

struct DiskScene {
  spectral::Hypercolumn hc;
  Mask truth;
};

/// Centered disk holding as close to 25% of the grid as a digital disk allows.
inline Mask centered_disk(Index grid) {
  const double c = (double(grid) - 1) / 2;
  const Index target = grid * grid / 4;
  Mask best;
  Index best_err = grid * grid;
  for (double r = 0.5; r < double(grid); r += 0.01) {
    Mask m = Mask::Zero(grid, grid);
    Index count = 0;
    for (Index y = 0; y < grid; ++y)
      for (Index x = 0; x < grid; ++x)
        if ((y - c) * (y - c) + (x - c) * (x - c) <= r * r) m(y, x) = 1, ++count;
    if (std::abs(count - target) < best_err) best_err = std::abs(count - target), best = m;
    if (count > target) break;
  }
  return best;
}

/// Two Gaussian feature clusters: one for the disk, one for the background.
inline DiskScene disk_scene(std::uint64_t seed, Index grid = 24, Index dim = 16, double noise = 0.35) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  Eigen::VectorXd mu_fg(dim), mu_bg(dim);
  for (Index i = 0; i < dim; ++i) mu_fg[i] = n01(rng), mu_bg[i] = n01(rng);
  mu_fg.normalize();
  mu_bg.normalize();

  DiskScene s;
  s.truth = centered_disk(grid);
  const Index n = grid * grid;
  s.hc.grid_h = s.hc.grid_w = grid;
  s.hc.level_dims = {dim};
  s.hc.features.resize(n, dim);
  for (Index p = 0; p < n; ++p) {
    Eigen::VectorXd f = s.truth(p / grid, p % grid) ? mu_fg : mu_bg;
    for (Index i = 0; i < dim; ++i) f[i] += noise * n01(rng) / std::sqrt(double(dim));
    s.hc.features.row(p) = f.normalized().transpose();
  }
  return s;
}

/// Random graph with unit self-affinity and a spanning path, so it is connected.
inline spectral::AffinityMatrix random_connected_affinity(Index n, std::mt19937_64& rng, double density = 0.3) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  spectral::AffinityMatrix a;
  a.w = Eigen::MatrixXd::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j)
      if (j == i + 1 || u(rng) < density) a.w(i, j) = a.w(j, i) = 0.05 + u(rng);
  a.w.diagonal().setOnes();
  return a;
}

}  // namespace afseg::testing

#pragma once

// Synthetic scenes that satisfy the dark-channel assumption: every 4×4 cell
// of the radiance has one color channel close to zero. Depth ramps from 1 m
// to 3 m over the lower three quarters; the top quarter is a 20 m far field
// where the medium dominates and the ambient light can be read off.

#include <cmath>
#include <random>

#include "lsnet/physics.hpp"

namespace fixtures {

using lsnet::Shape;
using lsnet::physics::Image;
using lsnet::physics::SceneModel;

inline SceneModel dcp_scene(std::uint64_t seed, std::size_t size = 64) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> bright(0.15, 0.9), dark(0.0, 0.005), tilt(-0.3, 0.3);
  std::uniform_int_distribution<int> channel(0, 2);
  SceneModel s;
  s.radiance = Image(Shape(1, 3, size, size));
  for (std::size_t by = 0; by < size; by += 4)
    for (std::size_t bx = 0; bx < size; bx += 4) {
      const int low = channel(rng);
      double base[3];
      for (int c = 0; c < 3; ++c) base[c] = c == low ? dark(rng) : bright(rng);
      for (std::size_t i = by; i < std::min(size, by + 4); ++i)
        for (std::size_t j = bx; j < std::min(size, bx + 4); ++j)
          for (int c = 0; c < 3; ++c) s.radiance(0, c, i, j) = base[c];
    }
  s.depth = lsnet::physics::depth_ramp(size, size, 1.0, 3.0, M_PI / 2 + tilt(rng));
  for (std::size_t i = 0; i < size / 4; ++i)
    for (std::size_t j = 0; j < size; ++j) s.depth(0, 0, i, j) = 20.0;
  s.eta = {0.3, 0.3, 0.3};
  s.ambient = {0.6, 0.8, 0.75};
  return s;
}

}  // namespace fixtures

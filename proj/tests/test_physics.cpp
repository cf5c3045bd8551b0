#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fixtures/scenes.hpp"
#include "lsnet/physics.hpp"
#include "oracles/naive.hpp"

using namespace lsnet;
using namespace lsnet::physics;
using Catch::Approx;

namespace {

SceneModel flat_scene(std::size_t h, std::size_t w, double J, double d, RGB eta, RGB A) {
  SceneModel s;
  s.radiance = Image(Shape(1, 3, h, w), J);
  s.depth = Image(Shape(1, 1, h, w), d);
  s.eta = eta;
  s.ambient = A;
  return s;
}

Image random_image(std::mt19937_64& rng, std::size_t h, std::size_t w) {
  return oracle::random_tensor<double>(Shape(1, 3, h, w), rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("degrade: zero depth is the identity") {
  std::mt19937_64 rng(1);
  SceneModel s = flat_scene(6, 5, 0.0, 0.0, {0.8, 0.2, 0.4}, {0.1, 0.6, 0.5});
  s.radiance = random_image(rng, 6, 5);
  const auto c = degrade(s);
  CHECK(c.total == s.radiance);
  for (double v : c.backscatter.data()) CHECK(v == 0.0);
}

TEST_CASE("degrade: great depth converges to the ambient light") {
  std::mt19937_64 rng(2);
  SceneModel s = flat_scene(4, 4, 0.0, 200.0, {0.8, 0.2, 0.4}, {0.1, 0.6, 0.5});
  s.radiance = random_image(rng, 4, 4);
  const auto c = degrade(s);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (double v : c.total.plane(0, ch)) CHECK(std::abs(v - s.ambient[ch]) < 1e-12);
}

TEST_CASE("degrade: scalar closed form at unit depth") {
  const RGB eta{0.8, 0.2, 0.4};
  const auto c = degrade(flat_scene(3, 3, 0.5, 1.0, eta, {0.8, 0.8, 0.8}));
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double t = std::exp(-eta[ch]);
    const double expect = 0.5 * t + 0.8 * (1.0 - t);
    for (double v : c.total.plane(0, ch)) CHECK(v == Approx(expect).epsilon(1e-15));
  }
  // Red: 0.5·e^-0.8 + 0.8·(1 − e^-0.8) = 0.6652013...
  CHECK(c.total(0, 0, 1, 1) == Approx(0.6652013).epsilon(1e-6));
}

TEST_CASE("degrade: components add up in evaluation order") {
  std::mt19937_64 rng(3);
  for (double gain : {0.0, 0.3}) {
    SceneModel s = fixtures::dcp_scene(4, 32);
    s.fs_gain = gain;
    s.fs_sigma_per_meter = 0.2;
    const auto c = degrade(s);
    for (std::size_t i = 0; i < c.total.size(); ++i)
      CHECK(c.total[i] == (c.direct[i] + c.forward_scatter[i]) + c.backscatter[i]);
    if (gain == 0.0)
      for (double v : c.forward_scatter.data()) CHECK(v == 0.0);
    else
      CHECK(std::any_of(c.forward_scatter.data().begin(), c.forward_scatter.data().end(),
                        [](double v) { return v > 0.0; }));
  }
}

TEST_CASE("degrade: deeper pixels move monotonically toward the ambient light") {
  std::mt19937_64 rng(4);
  SceneModel s = flat_scene(8, 8, 0.0, 0.0, {0.8, 0.2, 0.4}, {0.1, 0.6, 0.5});
  s.radiance = random_image(rng, 8, 8);
  Image prev = degrade(s).total;
  for (double d = 0.25; d <= 10.0; d += 0.25) {
    for (auto& v : s.depth.data()) v = d;
    const Image cur = degrade(s).total;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t i = 0; i < 64; ++i)
        CHECK(std::abs(cur.plane(0, ch)[i] - s.ambient[ch]) <= std::abs(prev.plane(0, ch)[i] - s.ambient[ch]));
    prev = cur;
  }
}

TEST_CASE("degrade: invalid scenes are rejected") {
  SceneModel s = flat_scene(2, 2, 0.5, 1.0, {0.8, -0.1, 0.4}, {0.5, 0.5, 0.5});
  CHECK_THROWS_AS(degrade(s), std::invalid_argument);
  s.eta = {0.1, 0.1, 0.1};
  s.depth[0] = -1.0;
  CHECK_THROWS_AS(degrade(s), std::invalid_argument);
}

TEST_CASE("dark_channel: channel minimum, constants and the window oracle") {
  Image px(Shape(1, 3, 1, 1), std::vector<double>{0.2, 0.7, 0.4});
  CHECK(dark_channel(px, 0)[0] == 0.2);
  for (double v : dark_channel(Image(Shape(1, 3, 5, 7), 0.35), 2).vec()) CHECK(v == 0.35);

  std::mt19937_64 rng(5);
  const Image img = random_image(rng, 8, 8);
  for (std::size_t r : {0u, 1u, 2u, 5u}) {
    const Image dc = dark_channel(img, r);
    for (long i = 0; i < 8; ++i)
      for (long j = 0; j < 8; ++j) {
        double m = 1e9;
        for (long di = -static_cast<long>(r); di <= static_cast<long>(r); ++di)
          for (long dj = -static_cast<long>(r); dj <= static_cast<long>(r); ++dj)
            for (std::size_t c = 0; c < 3; ++c)
              m = std::min(m, img(0, c, std::clamp(i + di, 0L, 7L), std::clamp(j + dj, 0L, 7L)));
        CHECK(dc(0, 0, i, j) == m);
      }
  }
}

TEST_CASE("dark_channel: growing the radius never raises a value") {
  std::mt19937_64 rng(6);
  const Image img = random_image(rng, 16, 12);
  Image prev = dark_channel(img, 0);
  for (std::size_t r = 1; r < 8; ++r) {
    const Image cur = dark_channel(img, r);
    for (std::size_t i = 0; i < cur.size(); ++i) CHECK(cur[i] <= prev[i]);
    prev = cur;
  }
}

TEST_CASE("estimate_airlight: constants, a lone bright pixel and ties") {
  const auto a = estimate_airlight(Image(Shape(1, 3, 10, 10), 0.4));
  CHECK(a == RGB{0.4, 0.4, 0.4});

  Image dark(Shape(1, 3, 20, 20), 0.05);
  for (std::size_t c = 0; c < 3; ++c) dark(0, c, 13, 6) = 1.0;
  CHECK(estimate_airlight(dark, 0) == RGB{1.0, 1.0, 1.0});

  // Two equally bright candidates: the earlier raster position wins.
  Image two(Shape(1, 3, 4, 4), 0.0);
  const RGB p{0.9, 0.5, 0.6}, q{0.6, 0.5, 0.9};
  for (std::size_t c = 0; c < 3; ++c) two(0, c, 1, 2) = p[c], two(0, c, 3, 0) = q[c];
  CHECK(estimate_airlight(two, 0, 0.5) == p);
}

TEST_CASE("estimate_airlight: recovers the ambient light of a synthetic far field") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto scene = fixtures::dcp_scene(seed);
    const auto a = estimate_airlight(degrade(scene).total);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(a[c] - scene.ambient[c]) < 0.05);
  }
}

TEST_CASE("estimate_transmission: closed forms and the simulator round trip") {
  const RGB A{0.3, 0.7, 0.5};
  Image same(Shape(1, 3, 6, 6));
  for (std::size_t c = 0; c < 3; ++c)
    for (auto& v : same.plane(0, c)) v = A[c];
  for (double v : estimate_transmission(same, A, 2, 0.95).t.vec()) CHECK(v == Approx(0.05).epsilon(1e-12));
  for (double v : estimate_transmission(Image(Shape(1, 3, 6, 6)), A).t.vec()) CHECK(v == 1.0);
  CHECK_THROWS_AS(estimate_transmission(same, RGB{0.3, 0.0, 0.5}), std::invalid_argument);

  // Constant depth with a black pixel in every 4×4 cell: the window minimum
  // is governed by the least attenuated channel.
  auto scene = fixtures::dcp_scene(7);
  for (std::size_t i = 0; i < 64; i += 4)
    for (std::size_t j = 0; j < 64; j += 4)
      for (std::size_t c = 0; c < 3; ++c) scene.radiance(0, c, i + 1, j + 2) = 0.0;
  for (auto& v : scene.depth.data()) v = 2.0;
  scene.eta = {0.8, 0.2, 0.4};
  const auto tm = estimate_transmission(degrade(scene).total, scene.ambient);
  const double expect = std::exp(-0.2 * 2.0);
  double worst = 0;
  for (double v : tm.t.data()) worst = std::max(worst, std::abs(v - expect));
  CHECK(worst < 0.05);
}

TEST_CASE("dcp_recover: closed forms") {
  std::mt19937_64 rng(8);
  const Image I = random_image(rng, 5, 5);
  const RGB A{0.2, 0.6, 0.5};
  CHECK(oracle::max_abs_diff(dcp_recover(I, A, Image(Shape(1, 1, 5, 5), 1.0)), I) < 1e-15);

  Image flatA(Shape(1, 3, 5, 5));
  for (std::size_t c = 0; c < 3; ++c)
    for (auto& v : flatA.plane(0, c)) v = A[c];
  CHECK(dcp_recover(flatA, A, Image(Shape(1, 1, 5, 5), 0.1), 0.1) == flatA);
  CHECK_THROWS_AS(dcp_recover(I, A, Image(Shape(1, 1, 4, 5), 1.0)), ShapeError);
  CHECK_THROWS_AS(dcp_recover(I, A, Image(Shape(1, 1, 5, 5), 1.0), 0.0), std::invalid_argument);
}

TEST_CASE("dcp_recover: exact inversion with the true ambient light and transmission") {
  std::mt19937_64 rng(9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto scene = fixtures::dcp_scene(seed);
    scene.eta = {0.8, 0.2, 0.4};  // per-channel transmission is fine here
    const auto c = degrade(scene);
    const Image J = dcp_recover(c.total, scene.ambient, c.transmission, 0.1);
    for (std::size_t i = 0; i < J.size(); ++i)
      if (c.transmission[i] >= 0.1) CHECK(std::abs(J[i] - scene.radiance[i]) < 1e-12);
  }
}

TEST_CASE("depth generators: ranges and reproducibility") {
  const Image ramp = depth_ramp(9, 17, 1.0, 3.0, 0.0);
  CHECK(ramp(0, 0, 4, 0) == Approx(1.0));
  CHECK(ramp(0, 0, 4, 16) == Approx(3.0));
  CHECK(ramp(0, 0, 0, 8) == Approx(2.0));
  const Image rad = depth_radial(11, 11, 0.5, 2.5, 0.5, 0.5);
  CHECK(rad(0, 0, 5, 5) == Approx(0.5));
  CHECK(rad(0, 0, 0, 0) == Approx(2.5));
  std::mt19937_64 a(3), b(3);
  CHECK(random_depth(16, 16, a, 0.5, 2.5) == random_depth(16, 16, b, 0.5, 2.5));
  for (double v : random_depth(16, 16, a, 0.5, 2.5).vec()) CHECK((v >= 0.5 - 1e-12 && v <= 2.5 + 1e-12));
}

TEST_CASE("gaussian_blur: preserves constants and mass away from edges") {
  for (double v : gaussian_blur(Image(Shape(1, 3, 9, 9), 0.4), 1.3).vec()) CHECK(v == Approx(0.4).epsilon(1e-14));
  Image spike(Shape(1, 1, 31, 31));
  spike(0, 0, 15, 15) = 1.0;
  double total = 0;
  for (double v : gaussian_blur(spike, 2.0).vec()) total += v;
  CHECK(total == Approx(1.0).epsilon(1e-12));
}

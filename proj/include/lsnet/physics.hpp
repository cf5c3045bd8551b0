#pragma once

// Underwater image formation (direct attenuation, forward scatter,
// backscatter) and the dark-channel-prior restorer.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "lsnet/tensor.hpp"

namespace lsnet::physics {

/// Images are (1, C, H, W) doubles in [0, 1]; depth maps are (1, 1, H, W).
using Image = Tensor<double>;
using RGB = std::array<double, 3>;

struct SceneModel {
  Image radiance;  // J, 3 channels
  Image depth;     // meters
  RGB eta{};       // attenuation per channel, 1/m
  RGB ambient{};   // A
  double fs_gain = 0.0;
  double fs_sigma_per_meter = 1.0;  // blur sigma = this × mean depth

  void validate() const {
    const Shape s = radiance.shape();
    require_shape(s[0] == 1 && s[1] == 3, "scene radiance must be (1, 3, H, W), got " + s.str());
    require_shape(depth.shape() == Shape(1, 1, s[2], s[3]), "depth " + depth.shape().str() + " does not match " + s.str());
    for (double e : eta)
      if (!(e >= 0.0) || !std::isfinite(e)) throw std::invalid_argument("attenuation must be finite and non-negative");
    for (double d : depth.data())
      if (!(d >= 0.0) || !std::isfinite(d)) throw std::invalid_argument("depth must be finite and non-negative");
    if (!(fs_gain >= 0.0)) throw std::invalid_argument("forward-scatter gain must be non-negative");
  }
};

struct DegradationComponents {
  Image direct;           // I_d
  Image forward_scatter;  // I_fs
  Image backscatter;      // I_bs
  Image total;            // I_T = (I_d + I_fs) + I_bs
  Image transmission;     // e^(-eta d), 3 channels
};

struct TransmissionMap {
  Image t;  // (1, 1, H, W), clipped to [0, 1]
  std::size_t radius = 0;
};

/// Per-channel e^(-eta·d).
inline Image transmission(const Image& depth, const RGB& eta) {
  const Shape s = depth.shape();
  Image t(Shape(1, 3, s[2], s[3]));
  for (std::size_t c = 0; c < 3; ++c) {
    auto src = depth.plane(0, 0);
    auto dst = t.plane(0, c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::exp(-eta[c] * src[i]);
  }
  return t;
}

/// Separable Gaussian blur, kernel radius ceil(3σ), edges replicated.
inline Image gaussian_blur(const Image& x, double sigma) {
  if (!(sigma > 0.0)) return x;
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  for (long i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
  const double norm = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= norm;

  const Shape s = x.shape();
  const long H = static_cast<long>(s[2]), W = static_cast<long>(s[3]);
  Image tmp(s), out(s);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c) {
      auto src = x.plane(n, c);
      auto mid = tmp.plane(n, c);
      auto dst = out.plane(n, c);
      for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j) {
          double acc = 0.0;
          for (long d = -r; d <= r; ++d) acc += k[d + r] * src[i * W + std::clamp(j + d, 0L, W - 1)];
          mid[i * W + j] = acc;
        }
      for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j) {
          double acc = 0.0;
          for (long d = -r; d <= r; ++d) acc += k[d + r] * mid[std::clamp(i + d, 0L, H - 1) * W + j];
          dst[i * W + j] = acc;
        }
    }
  return out;
}

/// I_T = J·t + I_fs + A·(1 − t) with t = e^(−η d).
inline DegradationComponents degrade(const SceneModel& scene) {
  scene.validate();
  DegradationComponents out;
  out.transmission = transmission(scene.depth, scene.eta);
  const Shape s = scene.radiance.shape();
  out.direct = Image(s);
  out.backscatter = Image(s);
  for (std::size_t c = 0; c < 3; ++c) {
    auto J = scene.radiance.plane(0, c);
    auto t = out.transmission.plane(0, c);
    auto d = out.direct.plane(0, c);
    auto b = out.backscatter.plane(0, c);
    for (std::size_t i = 0; i < J.size(); ++i) {
      d[i] = J[i] * t[i];
      b[i] = scene.ambient[c] * (1.0 - t[i]);
    }
  }
  if (scene.fs_gain > 0.0) {
    double mean_depth = 0.0;
    for (double v : scene.depth.data()) mean_depth += v;
    mean_depth /= static_cast<double>(scene.depth.size());
    out.forward_scatter = gaussian_blur(out.direct, scene.fs_sigma_per_meter * mean_depth);
    for (auto& v : out.forward_scatter.data()) v *= scene.fs_gain;
  } else {
    out.forward_scatter = Image(s);
  }
  out.total = Image(s);
  for (std::size_t i = 0; i < out.total.size(); ++i)
    out.total[i] = (out.direct[i] + out.forward_scatter[i]) + out.backscatter[i];
  return out;
}

/// Minimum over channels, then over the (2r+1)² window with edges replicated.
inline Image dark_channel(const Image& img, std::size_t radius) {
  const Shape s = img.shape();
  require_shape(s[0] == 1 && s[1] >= 1, "dark_channel: expected (1, C, H, W), got " + s.str());
  const long H = static_cast<long>(s[2]), W = static_cast<long>(s[3]), r = static_cast<long>(radius);
  std::vector<double> cmin(img.plane(0, 0).begin(), img.plane(0, 0).end());
  for (std::size_t c = 1; c < s[1]; ++c) {
    auto p = img.plane(0, c);
    for (std::size_t i = 0; i < cmin.size(); ++i) cmin[i] = std::min(cmin[i], p[i]);
  }
  std::vector<double> rows(cmin.size());
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j) {
      double m = cmin[i * W + j];
      for (long d = std::max(0L, j - r); d <= std::min(W - 1, j + r); ++d) m = std::min(m, cmin[i * W + d]);
      rows[i * W + j] = m;
    }
  Image out(Shape(1, 1, s[2], s[3]));
  auto dst = out.plane(0, 0);
  for (long i = 0; i < H; ++i)
    for (long j = 0; j < W; ++j) {
      double m = rows[i * W + j];
      for (long d = std::max(0L, i - r); d <= std::min(H - 1, i + r); ++d) m = std::min(m, rows[d * W + j]);
      dst[i * W + j] = m;
    }
  return out;
}

/// Ambient light: among the brightest `top_fraction` of dark-channel pixels
/// (at least one), the pixel with the largest R+G+B. Ties go to the lower
/// raster index.
inline RGB estimate_airlight(const Image& img, std::size_t radius = 7, double top_fraction = 0.001) {
  const Shape s = img.shape();
  require_shape(s[0] == 1 && s[1] == 3 && s.plane() > 0, "estimate_airlight: expected non-empty (1, 3, H, W)");
  const Image dark = dark_channel(img, radius);
  const std::size_t P = s.plane();
  const std::size_t count =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(P))));
  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), 0);
  auto dk = dark.plane(0, 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dk[a] > dk[b]; });
  std::sort(order.begin(), order.begin() + static_cast<long>(count));
  std::size_t best = order[0];
  double best_sum = -1.0;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    const double sum = img.plane(0, 0)[i] + img.plane(0, 1)[i] + img.plane(0, 2)[i];
    if (sum > best_sum) best_sum = sum, best = i;
  }
  return {img.plane(0, 0)[best], img.plane(0, 1)[best], img.plane(0, 2)[best]};
}

/// t̃ = 1 − ω · dark_channel(I / A), clipped to [0, 1].
inline TransmissionMap estimate_transmission(const Image& img, const RGB& ambient, std::size_t radius = 7,
                                             double omega = 0.95) {
  const Shape s = img.shape();
  require_shape(s[0] == 1 && s[1] == 3, "estimate_transmission: expected (1, 3, H, W), got " + s.str());
  for (double a : ambient)
    if (!(a > 0.0)) throw std::invalid_argument("estimate_transmission: ambient light must be positive per channel");
  Image ratio(s);
  for (std::size_t c = 0; c < 3; ++c) {
    auto src = img.plane(0, c);
    auto dst = ratio.plane(0, c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / ambient[c];
  }
  TransmissionMap out{dark_channel(ratio, radius), radius};
  for (auto& v : out.t.data()) v = std::clamp(1.0 - omega * v, 0.0, 1.0);
  return out;
}

/// J = (I − A) / max(t, t0) + A. t is one shared channel or one per color.
/// The result is not clipped; clip01 prepares it for export.
inline Image dcp_recover(const Image& img, const RGB& ambient, const Image& t, double t0 = 0.1) {
  const Shape s = img.shape();
  require_shape(s[0] == 1 && s[1] == 3, "dcp_recover: expected (1, 3, H, W), got " + s.str());
  require_shape(t.shape()[0] == 1 && (t.shape()[1] == 1 || t.shape()[1] == 3) && t.shape()[2] == s[2] &&
                    t.shape()[3] == s[3],
                "dcp_recover: transmission " + t.shape().str() + " does not match " + s.str());
  if (!(t0 > 0.0 && t0 <= 1.0)) throw std::invalid_argument("dcp_recover: t0 must lie in (0, 1]");
  Image out(s);
  for (std::size_t c = 0; c < 3; ++c) {
    auto src = img.plane(0, c);
    auto tt = t.plane(0, t.shape()[1] == 1 ? 0 : c);
    auto dst = out.plane(0, c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = (src[i] - ambient[c]) / std::max(tt[i], t0) + ambient[c];
  }
  return out;
}

struct DcpOptions {
  std::size_t radius = 7;
  double omega = 0.95;
  double t0 = 0.1;
  double top_fraction = 0.001;
};

struct DcpResult {
  RGB ambient{};
  TransmissionMap transmission;
  Image recovered;
};

/// Full classical pipeline: airlight, transmission, inversion.
inline DcpResult dcp_restore(const Image& img, const DcpOptions& opt = {}) {
  DcpResult r;
  r.ambient = estimate_airlight(img, opt.radius, opt.top_fraction);
  for (auto& a : r.ambient) a = std::max(a, 1e-6);
  r.transmission = estimate_transmission(img, r.ambient, opt.radius, opt.omega);
  r.recovered = dcp_recover(img, r.ambient, r.transmission.t, opt.t0);
  return r;
}

inline Image clip01(Image x) {
  for (auto& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

/// Linear depth ramp from `near` to `far` along the direction `angle`
/// (radians, 0 = left to right).
inline Image depth_ramp(std::size_t height, std::size_t width, double near, double far, double angle) {
  Image d(Shape(1, 1, height, width));
  const double cx = std::cos(angle), cy = std::sin(angle);
  double lo = 0.0, hi = 0.0;
  for (double y : {0.0, static_cast<double>(height - 1)})
    for (double x : {0.0, static_cast<double>(width - 1)}) {
      lo = std::min(lo, x * cx + y * cy);
      hi = std::max(hi, x * cx + y * cy);
    }
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j)
      d(0, 0, i, j) = near + (far - near) * ((static_cast<double>(j) * cx + static_cast<double>(i) * cy - lo) / span);
  return d;
}

/// Radial gradient: `near` at (cy, cx) in relative coordinates, `far` at the
/// most distant corner.
inline Image depth_radial(std::size_t height, std::size_t width, double near, double far, double cy, double cx) {
  Image d(Shape(1, 1, height, width));
  const double py = cy * static_cast<double>(height - 1), px = cx * static_cast<double>(width - 1);
  double rmax = 0.0;
  for (double y : {0.0, static_cast<double>(height - 1)})
    for (double x : {0.0, static_cast<double>(width - 1)}) rmax = std::max(rmax, std::hypot(y - py, x - px));
  if (rmax == 0.0) rmax = 1.0;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j)
      d(0, 0, i, j) =
          near + (far - near) * std::hypot(static_cast<double>(i) - py, static_cast<double>(j) - px) / rmax;
  return d;
}

/// Seeded choice between a ramp in a random direction and a radial gradient
/// around a random center.
inline Image random_depth(std::size_t height, std::size_t width, std::mt19937_64& rng, double near, double far) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < 0.5) return depth_ramp(height, width, near, far, u(rng) * 2.0 * M_PI);
  const double cy = u(rng), cx = u(rng);
  return depth_radial(height, width, near, far, cy, cx);
}

}  // namespace lsnet::physics

#pragma once

// Image quality metrics on (1, 3, H, W) double images in [0, 1].
// Full-reference: PSNR, SSIM. No-reference: UIQM (UICM, UISM, UIConM), UCIQE.

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lsnet/tensor.hpp"

namespace lsnet::metrics {

using Image = Tensor<double>;

/// Every tunable constant of the metric suite in one place.
struct MetricConstants {
  double psnr_cap_db = 100.0;

  std::size_t ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  std::array<double, 3> luma{0.299, 0.587, 0.114};

  double uicm_alpha = 0.1;  // trimmed fraction on each tail
  double uicm_mu_weight = -0.0268;
  double uicm_sigma_weight = 0.1586;
  std::size_t uiqm_block = 10;
  std::array<double, 3> uism_channel_weights{0.299, 0.587, 0.114};
  double uiqm_c1 = 0.0282;
  double uiqm_c2 = 0.2953;
  double uiqm_c3 = 3.5753;

  double uciqe_c1 = 0.4680;
  double uciqe_c2 = 0.2745;
  double uciqe_c3 = 0.2576;
  double uciqe_low_percentile = 0.01;
  double uciqe_high_percentile = 0.99;
};

inline const MetricConstants& default_constants() {
  static const MetricConstants c;
  return c;
}

namespace detail {

inline void require_color(const Image& x, const char* who) {
  require_shape(x.shape()[0] == 1 && x.shape()[1] == 3,
                std::string(who) + ": expected a (1, 3, H, W) color image, got " + x.shape().str());
}

inline std::vector<double> luma(const Image& x, const std::array<double, 3>& w) {
  if (x.shape()[1] == 1) return {x.data().begin(), x.data().end()};
  require_color(x, "luma");
  auto r = x.plane(0, 0), g = x.plane(0, 1), b = x.plane(0, 2);
  std::vector<double> y(r.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = w[0] * r[i] + w[1] * g[i] + w[2] * b[i];
  return y;
}

/// Gaussian-weighted sums of f over every valid window position.
inline std::vector<double> window_filter(const std::vector<double>& f, std::size_t H, std::size_t W,
                                         const std::vector<double>& k) {
  const std::size_t n = k.size(), oh = H - n + 1, ow = W - n + 1;
  std::vector<double> rows(H * ow), out(oh * ow);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * f[i * W + j + t];
      rows[i * ow + j] = s;
    }
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < n; ++t) s += k[t] * rows[(i + t) * ow + j];
      out[i * ow + j] = s;
    }
  return out;
}

/// Sobel gradient magnitude with half-sample symmetric boundaries.
inline std::vector<double> sobel_magnitude(std::span<const double> x, std::size_t H, std::size_t W) {
  auto at = [&](long i, long j) {
    auto refl = [](long v, long n) {
      if (v < 0) return -v - 1;
      if (v >= n) return 2 * n - v - 1;
      return v;
    };
    return x[static_cast<std::size_t>(refl(i, static_cast<long>(H))) * W +
             static_cast<std::size_t>(refl(j, static_cast<long>(W)))];
  };
  std::vector<double> mag(H * W);
  for (long i = 0; i < static_cast<long>(H); ++i)
    for (long j = 0; j < static_cast<long>(W); ++j) {
      const double gy = (at(i + 1, j - 1) + 2 * at(i + 1, j) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i - 1, j) + at(i - 1, j + 1));
      const double gx = (at(i - 1, j + 1) + 2 * at(i, j + 1) + at(i + 1, j + 1)) -
                        (at(i - 1, j - 1) + 2 * at(i, j - 1) + at(i + 1, j - 1));
      mag[static_cast<std::size_t>(i) * W + static_cast<std::size_t>(j)] = std::hypot(gy, gx);
    }
  return mag;
}

inline void require_blocks(std::size_t H, std::size_t W, std::size_t block) {
  require_shape(H >= block && W >= block, "image " + std::to_string(H) + "x" + std::to_string(W) +
                                              " is smaller than the " + std::to_string(block) + "-pixel block");
}

/// Measure of enhancement: 2/(k1·k2) · Σ log(max/min) over full blocks,
/// skipping blocks whose min or max is zero.
inline double eme(const std::vector<double>& x, std::size_t H, std::size_t W, std::size_t block) {
  require_blocks(H, W, block);
  const std::size_t k1 = W / block, k2 = H / block;
  double val = 0.0;
  for (std::size_t bc = 0; bc < k1; ++bc)
    for (std::size_t br = 0; br < k2; ++br) {
      double mx = -INFINITY, mn = INFINITY;
      for (std::size_t i = br * block; i < (br + 1) * block; ++i)
        for (std::size_t j = bc * block; j < (bc + 1) * block; ++j) {
          mx = std::max(mx, x[i * W + j]);
          mn = std::min(mn, x[i * W + j]);
        }
      if (mn == 0.0 || mx == 0.0) continue;
      val += std::log(mx / mn);
    }
  return 2.0 / static_cast<double>(k1 * k2) * val;
}

inline double srgb_to_linear(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

}  // namespace detail

/// 10·log10(peak² / MSE); identical inputs report the capped sentinel.
inline double psnr(const Image& x, const Image& y, double peak = 1.0,
                   const MetricConstants& k = default_constants()) {
  require_shape(x.shape() == y.shape(), "psnr: shapes " + x.shape().str() + " and " + y.shape().str() + " differ");
  require_shape(x.size() > 0, "psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return k.psnr_cap_db;
  return std::min(k.psnr_cap_db, 10.0 * std::log10(peak * peak / mse));
}

/// Mean SSIM over valid 11×11 Gaussian windows of the luma images.
inline double ssim(const Image& x, const Image& y, double peak = 1.0, const MetricConstants& k = default_constants()) {
  require_shape(x.shape() == y.shape(), "ssim: shapes " + x.shape().str() + " and " + y.shape().str() + " differ");
  const std::size_t H = x.shape()[2], W = x.shape()[3], n = k.ssim_window;
  require_shape(H >= n && W >= n, "ssim: image " + x.shape().str() + " is smaller than the " + std::to_string(n) +
                                      "-pixel window");
  std::vector<double> g(n);
  const double c = static_cast<double>(n / 2);
  double gs = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    gs += g[i] = std::exp(-0.5 * (static_cast<double>(i) - c) * (static_cast<double>(i) - c) /
                          (k.ssim_sigma * k.ssim_sigma));
  for (auto& v : g) v /= gs;

  const auto a = detail::luma(x, k.luma), b = detail::luma(y, k.luma);
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto ma = detail::window_filter(a, H, W, g), mb = detail::window_filter(b, H, W, g);
  const auto saa = detail::window_filter(aa, H, W, g), sbb = detail::window_filter(bb, H, W, g),
             sab = detail::window_filter(ab, H, W, g);
  const double C1 = (k.ssim_k1 * peak) * (k.ssim_k1 * peak), C2 = (k.ssim_k2 * peak) * (k.ssim_k2 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const double vx = saa[i] - ma[i] * ma[i];
    const double vy = sbb[i] - mb[i] * mb[i];
    const double cxy = sab[i] - ma[i] * mb[i];
    total += ((2 * ma[i] * mb[i] + C1) * (2 * cxy + C2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + C1) * (vx + vy + C2));
  }
  return total / static_cast<double>(ma.size());
}

struct UiqmComponents {
  double uicm = 0.0;
  double uism = 0.0;
  double uiconm = 0.0;
  double uiqm = 0.0;
};

/// Alpha-trimmed mean of the sorted values: drops ceil(αK) from the low end
/// and floor(αK) from the high end.
inline double trimmed_mean(std::vector<double> v, double alpha) {
  std::sort(v.begin(), v.end());
  const std::size_t K = v.size();
  const auto lo = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(K)));
  const auto hi = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(K)));
  if (lo + hi >= K) return 0.0;
  double s = 0.0;
  for (std::size_t i = lo; i < K - hi; ++i) s += v[i];
  return s / static_cast<double>(K - lo - hi);
}

/// Colorfulness from the RG and YB opponent channels on the 0–255 scale.
inline double uicm(const Image& x, const MetricConstants& k = default_constants()) {
  detail::require_color(x, "uicm");
  auto r = x.plane(0, 0), g = x.plane(0, 1), b = x.plane(0, 2);
  std::vector<double> rg(r.size()), yb(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double R = 255.0 * r[i], G = 255.0 * g[i], B = 255.0 * b[i];
    rg[i] = R - G;
    yb[i] = (R + G) / 2.0 - B;
  }
  const double mu_rg = trimmed_mean(rg, k.uicm_alpha), mu_yb = trimmed_mean(yb, k.uicm_alpha);
  double s_rg = 0.0, s_yb = 0.0;
  for (std::size_t i = 0; i < rg.size(); ++i) {
    s_rg += (rg[i] - mu_rg) * (rg[i] - mu_rg);
    s_yb += (yb[i] - mu_yb) * (yb[i] - mu_yb);
  }
  s_rg /= static_cast<double>(rg.size());
  s_yb /= static_cast<double>(yb.size());
  return k.uicm_mu_weight * std::sqrt(mu_rg * mu_rg + mu_yb * mu_yb) + k.uicm_sigma_weight * std::sqrt(s_rg + s_yb);
}

/// Sharpness: EME of each channel weighted by its normalized Sobel edge map.
inline double uism(const Image& x, const MetricConstants& k = default_constants()) {
  detail::require_color(x, "uism");
  const std::size_t H = x.shape()[2], W = x.shape()[3];
  detail::require_blocks(H, W, k.uiqm_block);
  double total = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> ch(x.plane(0, c).begin(), x.plane(0, c).end());
    for (auto& v : ch) v *= 255.0;
    auto mag = detail::sobel_magnitude(ch, H, W);
    const double mx = *std::max_element(mag.begin(), mag.end());
    for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = (mx > 0.0 ? mag[i] * (255.0 / mx) : 0.0) * ch[i];
    total += k.uism_channel_weights[c] * detail::eme(mag, H, W, k.uiqm_block);
  }
  return total;
}

/// Contrast: logAMEE over blocks spanning all three channels.
inline double uiconm(const Image& x, const MetricConstants& k = default_constants()) {
  detail::require_color(x, "uiconm");
  const std::size_t H = x.shape()[2], W = x.shape()[3], n = k.uiqm_block;
  detail::require_blocks(H, W, n);
  const std::size_t k1 = W / n, k2 = H / n;
  double val = 0.0;
  for (std::size_t bc = 0; bc < k1; ++bc)
    for (std::size_t br = 0; br < k2; ++br) {
      double mx = -INFINITY, mn = INFINITY;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = br * n; i < (br + 1) * n; ++i)
          for (std::size_t j = bc * n; j < (bc + 1) * n; ++j) {
            const double v = 255.0 * x(0, c, i, j);
            mx = std::max(mx, v);
            mn = std::min(mn, v);
          }
      const double top = mx - mn, bot = mx + mn;
      if (top == 0.0 || bot == 0.0 || std::isnan(top) || std::isnan(bot)) continue;
      val += (top / bot) * std::log(top / bot);
    }
  return -1.0 / static_cast<double>(k1 * k2) * val;
}

inline UiqmComponents uiqm_components(const Image& x, const MetricConstants& k = default_constants()) {
  UiqmComponents u;
  u.uicm = uicm(x, k);
  u.uism = uism(x, k);
  u.uiconm = uiconm(x, k);
  u.uiqm = k.uiqm_c1 * u.uicm + k.uiqm_c2 * u.uism + k.uiqm_c3 * u.uiconm;
  return u;
}

/// CIELAB (D65) of an sRGB image: L* in [0, 100], a*, b* unbounded.
struct Lab {
  std::vector<double> L, a, b;
};

inline Lab to_lab(const Image& x) {
  detail::require_color(x, "to_lab");
  static constexpr double M[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                                     {0.2126729, 0.7151522, 0.0721750},
                                     {0.0193339, 0.1191920, 0.9503041}};
  // White point = M·(1, 1, 1), so R = G = B maps to a* = b* = 0.
  static constexpr double white[3] = {M[0][0] + M[0][1] + M[0][2], M[1][0] + M[1][1] + M[1][2],
                                      M[2][0] + M[2][1] + M[2][2]};
  auto r = x.plane(0, 0), g = x.plane(0, 1), b = x.plane(0, 2);
  Lab out{std::vector<double>(r.size()), std::vector<double>(r.size()), std::vector<double>(r.size())};
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double lin[3] = {detail::srgb_to_linear(std::clamp(r[i], 0.0, 1.0)),
                           detail::srgb_to_linear(std::clamp(g[i], 0.0, 1.0)),
                           detail::srgb_to_linear(std::clamp(b[i], 0.0, 1.0))};
    double f[3];
    for (int row = 0; row < 3; ++row)
      f[row] = detail::lab_f((M[row][0] * lin[0] + M[row][1] * lin[1] + M[row][2] * lin[2]) / white[row]);
    out.L[i] = 116.0 * f[1] - 16.0;
    out.a[i] = 500.0 * (f[0] - f[1]);
    out.b[i] = 200.0 * (f[1] - f[2]);
  }
  return out;
}

struct UciqeComponents {
  double chroma_std = 0.0;
  double luminance_contrast = 0.0;
  double saturation = 0.0;
  double uciqe = 0.0;
};

/// Weighted chroma spread, luminance percentile contrast and mean
/// saturation, with L* scaled by 1/100 and a*, b* by 1/255.
inline UciqeComponents uciqe_components(const Image& x, const MetricConstants& k = default_constants()) {
  const Lab lab = to_lab(x);
  const std::size_t n = lab.L.size();
  require_shape(n > 0, "uciqe: empty image");
  std::vector<double> L(n), chroma(n);
  double mean_c = 0.0, mean_s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    L[i] = lab.L[i] / 100.0;
    const double a = lab.a[i] / 255.0, b = lab.b[i] / 255.0;
    chroma[i] = std::sqrt(a * a + b * b);
    mean_c += chroma[i];
    mean_s += L[i] > 0.0 ? chroma[i] / L[i] : 0.0;
  }
  mean_c /= static_cast<double>(n);
  mean_s /= static_cast<double>(n);
  double var = 0.0;
  for (double c : chroma) var += (c - mean_c) * (c - mean_c);
  var /= static_cast<double>(n);
  std::sort(L.begin(), L.end());
  const auto lo = static_cast<std::size_t>(k.uciqe_low_percentile * static_cast<double>(n));
  const auto hi = std::min(n - 1, static_cast<std::size_t>(k.uciqe_high_percentile * static_cast<double>(n)));
  UciqeComponents u;
  u.chroma_std = std::sqrt(var);
  u.luminance_contrast = L[hi] - L[lo];
  u.saturation = mean_s;
  u.uciqe = k.uciqe_c1 * u.chroma_std + k.uciqe_c2 * u.luminance_contrast + k.uciqe_c3 * u.saturation;
  return u;
}

inline double uciqe(const Image& x, const MetricConstants& k = default_constants()) {
  return uciqe_components(x, k).uciqe;
}

struct MetricsRecord {
  std::string name;
  std::optional<double> psnr;  // absent without a reference
  std::optional<double> ssim;
  double uiqm = 0.0;
  double uicm = 0.0;
  double uism = 0.0;
  double uiconm = 0.0;
  double uciqe = 0.0;
};

inline MetricsRecord evaluate(std::string name, const Image& x, const Image* reference = nullptr,
                              const MetricConstants& k = default_constants()) {
  MetricsRecord r;
  r.name = std::move(name);
  if (reference) {
    r.psnr = psnr(x, *reference, 1.0, k);
    r.ssim = ssim(x, *reference, 1.0, k);
  }
  const auto u = uiqm_components(x, k);
  r.uiqm = u.uiqm;
  r.uicm = u.uicm;
  r.uism = u.uism;
  r.uiconm = u.uiconm;
  r.uciqe = uciqe(x, k);
  return r;
}

struct MetricsReport {
  std::vector<MetricsRecord> records;

  /// Column means; a full-reference mean is absent if any record lacks it.
  MetricsRecord mean() const {
    MetricsRecord m;
    m.name = "mean";
    if (records.empty()) return m;
    const double n = static_cast<double>(records.size());
    bool has_ref = true;
    double p = 0, s = 0;
    for (const auto& r : records) {
      has_ref = has_ref && r.psnr && r.ssim;
      if (has_ref) p += *r.psnr, s += *r.ssim;
      m.uiqm += r.uiqm / n;
      m.uicm += r.uicm / n;
      m.uism += r.uism / n;
      m.uiconm += r.uiconm / n;
      m.uciqe += r.uciqe / n;
    }
    if (has_ref) m.psnr = p / n, m.ssim = s / n;
    return m;
  }

  /// Comma-separated table: PSNR, SSIM, UIQM, UICM, UISM, UCIQE in that
  /// order, then UIConM. NIQE and PCQI are listed as NA.
  void write_csv(std::ostream& os) const {
    os << "image,PSNR,SSIM,UIQM,UICM,UISM,UCIQE,UIConM,NIQE,PCQI\n";
    auto opt = [](const std::optional<double>& v) {
      if (!v) return std::string("NA");
      std::ostringstream s;
      s << std::setprecision(10) << *v;
      return s.str();
    };
    auto row = [&](const MetricsRecord& r) {
      os << r.name << ',' << opt(r.psnr) << ',' << opt(r.ssim) << ',' << opt(r.uiqm) << ',' << opt(r.uicm) << ','
         << opt(r.uism) << ',' << opt(r.uciqe) << ',' << opt(r.uiconm) << ",NA,NA\n";
    };
    for (const auto& r : records) row(r);
    row(mean());
  }
};

}  // namespace lsnet::metrics

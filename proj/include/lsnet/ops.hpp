#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "lsnet/autodiff.hpp"
#include "lsnet/tensor.hpp"

// Differentiable operations over NCHW tensors. Each op computes its output
// eagerly and records a backward rule on the operands' tape.

namespace lsnet {

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_shape(a.shape() == b.shape(), "add: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::span<const T> g) {
    for (std::size_t id : {ia, ib}) {
      auto ga = t.grad_buffer(id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_shape(a.shape() == b.shape(), "sub: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = t.grad_buffer(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_shape(a.shape() == b.shape(), "mul: " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, std::span<const T> g) {
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    auto gb = t.grad_buffer(ib);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, s](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
  });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out(Shape(1, 1, 1, 1));
  out[0] = static_cast<T>(detail::sum(a.value().data().data(), a.value().size()));
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_buffer(ia);
    for (auto& v : ga) v += g[0];
  });
}

/// Mean absolute error. The subgradient at an exact tie is 0.
template <class T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
  require_shape(pred.shape() == target.shape(),
                "l1_loss: " + pred.shape().str() + " vs " + target.shape().str());
  const auto& p = pred.value();
  const auto& q = target.value();
  const std::size_t n = p.size();
  require_shape(n > 0, "l1_loss on empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(p[i]) - static_cast<double>(q[i]));
  Tensor<T> out(Shape(1, 1, 1, 1));
  out[0] = static_cast<T>(acc / static_cast<double>(n));
  const std::size_t ip = pred.id(), iq = target.id();
  return pred.tape()->record(std::move(out), {pred, target}, [ip, iq, n](Tape<T>& t, std::span<const T> g) {
    const auto& p = t.value(ip);
    const auto& q = t.value(iq);
    const T step = g[0] / static_cast<T>(n);
    auto gp = t.grad_buffer(ip);
    auto gq = t.grad_buffer(iq);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = p[i] - q[i];
      const T s = d > T{0} ? step : (d < T{0} ? -step : T{0});
      if (!gp.empty()) gp[i] += s;
      if (!gq.empty()) gq[i] -= s;
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  Tensor<T> out = a.value().reshaped(s);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Activation

namespace detail {

template <class T>
struct GeluTanh {
  static constexpr T kAlpha = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kCubic = static_cast<T>(0.044715);

  // 0.5·(1 + tanh(u)) written as a logistic, one exp per element.
  static T gate(T x) {
    const T u = kAlpha * (x + kCubic * x * x * x);
    return T{1} / (T{1} + std::exp(T{-2} * u));
  }
  static T value(T x) { return x * gate(x); }
  static T derivative(T x, T s) {
    const T du = kAlpha * (T{1} + T{3} * kCubic * x * x);
    return s + T{2} * x * s * (T{1} - s) * du;
  }
  static T derivative(T x) { return derivative(x, gate(x)); }
};

}  // namespace detail

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  std::vector<T> gates(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    gates[i] = detail::GeluTanh<T>::gate(xv[i]);
    out[i] = xv[i] * gates[i];
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [ix, gates = std::move(gates)](Tape<T>& t, std::span<const T> g) {
    const auto& xv = t.value(ix);
    auto gx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * detail::GeluTanh<T>::derivative(xv[i], gates[i]);
  });
}

// ---------------------------------------------------------------------------
// Convolution

/// 1×1 convolution whose weights may differ per batch group: entry n uses
/// group (n / group_stride) % groups. Weight (groups·out, in, 1, 1), bias
/// (1, groups·out, 1, 1). groups = 1 is an ordinary pointwise convolution.
template <class T>
Var<T> pointwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t groups = 1,
                      std::size_t group_stride = 1) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  require_shape(groups >= 1 && group_stride >= 1, "pointwise_conv: groups and stride must be positive");
  require_shape(ws[2] == 1 && ws[3] == 1, "pointwise_conv: weight must be 1x1, got " + ws.str());
  require_shape(ws[0] % groups == 0, "pointwise_conv: weight rows not divisible by group count");
  require_shape(xs[1] == ws[1], "pointwise_conv: input has " + std::to_string(xs[1]) +
                                    " channels, weight expects " + std::to_string(ws[1]));
  require_shape(b.shape() == Shape(1, ws[0], 1, 1), "pointwise_conv: bias shape " + b.shape().str());
  const std::size_t N = xs[0], C = xs[1], P = xs.plane(), O = ws[0] / groups;

  Tensor<T> out(Shape(N, O, xs[2], xs[3]));
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t g = (n / group_stride) % groups;
    for (std::size_t o = 0; o < O; ++o) {
      const std::size_t row = g * O + o;
      T* y = out.plane(n, o).data();
      std::fill(y, y + P, bv[row]);
      detail::combine(wv.data().data() + row * C, 1, xv.plane(n, 0).data(), P, C, y, P);
    }
  }

  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape()->record(
      std::move(out), {x, w, b}, [=](Tape<T>& t, std::span<const T> g) {
        const auto& xv = t.value(ix);
        const auto& wv = t.value(iw);
        auto gx = t.grad_buffer(ix);
        auto gw = t.grad_buffer(iw);
        auto gb = t.grad_buffer(ib);
        std::vector<double> accw(gw.empty() ? 0 : gw.size(), 0.0);
        std::vector<double> accb(gb.empty() ? 0 : gb.size(), 0.0);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t grp = (n / group_stride) % groups;
          for (std::size_t o = 0; o < O; ++o) {
            const std::size_t row = grp * O + o;
            const T* gy = g.data() + (n * O + o) * P;
            if (!accb.empty()) accb[row] += detail::sum(gy, P);
            if (!accw.empty())
              for (std::size_t c = 0; c < C; ++c)
                accw[row * C + c] += detail::dot(gy, xv.data().data() + (n * C + c) * P, P);
          }
          if (!gx.empty())
            for (std::size_t c = 0; c < C; ++c)
              detail::combine(wv.data().data() + grp * O * C + c, C, g.data() + n * O * P, P, O,
                              gx.data() + (n * C + c) * P, P);
        }
        for (std::size_t i = 0; i < accw.size(); ++i) gw[i] += static_cast<T>(accw[i]);
        for (std::size_t i = 0; i < accb.size(); ++i) gb[i] += static_cast<T>(accb[i]);
      });
}

/// Stride-1 convolution with an odd square kernel and zero "same" padding.
/// Weight (out, in, k, k), bias (1, out, 1, 1).
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  require_shape(ws[2] == ws[3] && ws[2] % 2 == 1, "conv2d: kernel must be square and odd, got " + ws.str());
  require_shape(xs[1] == ws[1], "conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                                    std::to_string(ws[1]));
  require_shape(b.shape() == Shape(1, ws[0], 1, 1), "conv2d: bias shape " + b.shape().str());
  if (ws[2] == 1) return pointwise_conv(x, w, b);

  const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3], O = ws[0], K = ws[2];
  const long pad = static_cast<long>(K / 2);
  // Visits every (output row, kernel tap) pair with the valid column span.
  auto for_taps = [=](auto&& fn) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      const long dy = static_cast<long>(ky) - pad;
      for (std::size_t kx = 0; kx < K; ++kx) {
        const long dx = static_cast<long>(kx) - pad;
        const std::size_t i0 = static_cast<std::size_t>(std::max(0L, -dy));
        const std::size_t i1 = static_cast<std::size_t>(std::min<long>(H, static_cast<long>(H) - dy));
        const std::size_t j0 = static_cast<std::size_t>(std::max(0L, -dx));
        const std::size_t j1 = static_cast<std::size_t>(std::min<long>(W, static_cast<long>(W) - dx));
        if (j1 <= j0) continue;
        for (std::size_t i = i0; i < i1; ++i)
          fn(ky, kx, i, static_cast<std::size_t>(static_cast<long>(i) + dy), j0,
             static_cast<std::size_t>(static_cast<long>(j0) + dx), j1 - j0);
      }
    }
  };

  Tensor<T> out(Shape(N, O, H, W));
  const auto& xv = x.value();
  const auto& wv = w.value();
  const auto& bv = b.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      auto y = out.plane(n, o);
      std::fill(y.begin(), y.end(), bv[o]);
      for (std::size_t c = 0; c < C; ++c) {
        const T* xp = xv.plane(n, c).data();
        for_taps([&](std::size_t ky, std::size_t kx, std::size_t i, std::size_t si, std::size_t j0,
                     std::size_t sj0, std::size_t len) {
          detail::axpy(wv[((o * C + c) * K + ky) * K + kx], xp + si * W + sj0, y.data() + i * W + j0, len);
        });
      }
    }

  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape()->record(std::move(out), {x, w, b}, [=](Tape<T>& t, std::span<const T> g) {
    const auto& xv = t.value(ix);
    const auto& wv = t.value(iw);
    auto gx = t.grad_buffer(ix);
    auto gw = t.grad_buffer(iw);
    auto gb = t.grad_buffer(ib);
    std::vector<double> accw(gw.size(), 0.0);
    std::vector<double> accb(gb.size(), 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const T* gy = g.data() + (n * O + o) * H * W;
        if (!accb.empty()) accb[o] += detail::sum(gy, H * W);
        for (std::size_t c = 0; c < C; ++c) {
          const T* xp = xv.data().data() + (n * C + c) * H * W;
          for_taps([&](std::size_t ky, std::size_t kx, std::size_t i, std::size_t si, std::size_t j0,
                       std::size_t sj0, std::size_t len) {
            const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
            if (!accw.empty()) accw[widx] += detail::dot(gy + i * W + j0, xp + si * W + sj0, len);
            if (!gx.empty())
              detail::axpy(wv[widx], gy + i * W + j0, gx.data() + (n * C + c) * H * W + si * W + sj0, len);
          });
        }
      }
    for (std::size_t i = 0; i < accw.size(); ++i) gw[i] += static_cast<T>(accw[i]);
    for (std::size_t i = 0; i < accb.size(); ++i) gb[i] += static_cast<T>(accb[i]);
  });
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { train, eval };

struct BatchNormOptions {
  double eps = 1e-5;       // variance floor
  double momentum = 0.1;   // running-stat update weight
};

/// Per-channel normalization over (batch, height, width). Variance is floored
/// at eps, so a constant channel maps to beta. Train mode updates the running
/// statistics in place (unbiased variance); eval mode reads them.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, Mode mode, BatchNormOptions opt = {}) {
  const Shape xs = x.shape();
  const std::size_t N = xs[0], C = xs[1], P = xs.plane();
  require_shape(gamma.shape() == Shape(1, C, 1, 1) && beta.shape() == Shape(1, C, 1, 1),
                "batch_norm: affine terms must be (1, " + std::to_string(C) + ", 1, 1)");
  require_shape(running_mean.shape() == Shape(1, C, 1, 1) && running_var.shape() == Shape(1, C, 1, 1),
                "batch_norm: running statistics must be (1, " + std::to_string(C) + ", 1, 1)");
  const std::size_t count = N * P;
  if (count == 0) throw ShapeError("batch_norm: channel has zero elements");

  std::vector<T> mean(C), inv(C);
  std::vector<char> clamped(C, 0);
  const auto& xv = x.value();
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += detail::sum(xv.plane(n, c).data(), P);
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (T v : xv.plane(n, c)) ss += (static_cast<double>(v) - mu) * (static_cast<double>(v) - mu);
      const double var = ss / static_cast<double>(count);
      clamped[c] = var < opt.eps;
      mean[c] = static_cast<T>(mu);
      inv[c] = static_cast<T>(1.0 / std::sqrt(std::max(var, opt.eps)));
      const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      running_mean[c] = static_cast<T>((1.0 - opt.momentum) * running_mean[c] + opt.momentum * mu);
      running_var[c] = static_cast<T>((1.0 - opt.momentum) * running_var[c] + opt.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean[c];
      inv[c] = static_cast<T>(1.0 / std::sqrt(std::max(static_cast<double>(running_var[c]), opt.eps)));
    }
  }

  Tensor<T> out(xs);
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* xp = xv.plane(n, c).data();
      T* y = out.plane(n, c).data();
      for (std::size_t p = 0; p < P; ++p) y[p] = gv[c] * ((xp[p] - mean[c]) * inv[c]) + bv[c];
    }

  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  const bool batch_stats = mode == Mode::train;
  return x.tape()->record(std::move(out), {x, gamma, beta}, [=](Tape<T>& t, std::span<const T> g) {
    const auto& xv = t.value(ix);
    const auto& gv = t.value(ig);
    auto gx = t.grad_buffer(ix);
    auto gg = t.grad_buffer(ig);
    auto gb = t.grad_buffer(ib);
    std::vector<T> xhat(P);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* xp = xv.plane(n, c).data();
        const T* gy = g.data() + (n * C + c) * P;
        for (std::size_t p = 0; p < P; ++p) xhat[p] = (xp[p] - mean[c]) * inv[c];
        sum_g += detail::sum(gy, P);
        sum_gx += detail::dot(gy, xhat.data(), P);
      }
      if (!gg.empty()) gg[c] += static_cast<T>(sum_gx);
      if (!gb.empty()) gb[c] += static_cast<T>(sum_g);
      if (gx.empty()) continue;
      const T gam = gv[c];
      if (!batch_stats) {
        for (std::size_t n = 0; n < N; ++n) {
          const T* gy = g.data() + (n * C + c) * P;
          T* dx = gx.data() + (n * C + c) * P;
          for (std::size_t p = 0; p < P; ++p) dx[p] += gy[p] * gam * inv[c];
        }
        continue;
      }
      // d xhat = gamma * g; dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
      const T mean_dxhat = static_cast<T>(static_cast<double>(gam) * sum_g / static_cast<double>(count));
      const T mean_dxhat_xhat =
          clamped[c] ? T{0} : static_cast<T>(static_cast<double>(gam) * sum_gx / static_cast<double>(count));
      for (std::size_t n = 0; n < N; ++n) {
        const T* xp = xv.plane(n, c).data();
        const T* gy = g.data() + (n * C + c) * P;
        T* dx = gx.data() + (n * C + c) * P;
        for (std::size_t p = 0; p < P; ++p) {
          const T xh = (xp[p] - mean[c]) * inv[c];
          dx[p] += inv[c] * (gam * gy[p] - mean_dxhat - xh * mean_dxhat_xhat);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Attention building blocks

/// Softmax along the width axis with max subtraction.
template <class T>
Var<T> softmax_lastdim(const Var<T>& x) {
  const Shape xs = x.shape();
  const std::size_t L = xs[3];
  require_shape(L >= 1, "softmax_lastdim: last dimension is empty");
  const std::size_t rows = xs.numel() / L;
  Tensor<T> out(xs);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data().data() + r * L;
    T* y = out.data().data() + r * L;
    const T mx = *std::max_element(in, in + L);
    T s{0};
    for (std::size_t j = 0; j < L; ++j) {
      y[j] = std::exp(in[j] - mx);
      s += y[j];
    }
    const T inv = T{1} / s;
    for (std::size_t j = 0; j < L; ++j) y[j] *= inv;
  }
  const std::size_t ix = x.id();
  const std::size_t self = x.tape()->size();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    const auto& y = t.value(self);
    auto gx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yr = y.data().data() + r * L;
      const T* gr = g.data() + r * L;
      T dotv{0};
      for (std::size_t j = 0; j < L; ++j) dotv += gr[j] * yr[j];
      for (std::size_t j = 0; j < L; ++j) gx[r * L + j] += yr[j] * (gr[j] - dotv);
    }
  });
}

/// Product of the trailing (m, k) and (k, n) matrices for every leading
/// (d0, d1) pair. With transpose_b the right operand is stored as (n, k).
template <class T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool transpose_b = false) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  require_shape(as[0] == bs[0] && as[1] == bs[1],
                "batched_matmul: batch extents differ " + as.str() + " vs " + bs.str());
  const std::size_t M = as[2], K = as[3];
  const std::size_t N = transpose_b ? bs[2] : bs[3];
  const std::size_t Kb = transpose_b ? bs[3] : bs[2];
  require_shape(K == Kb, "batched_matmul: inner dimensions " + std::to_string(K) + " and " +
                             std::to_string(Kb) + " differ");
  const std::size_t batches = as[0] * as[1];
  Tensor<T> out(Shape(as[0], as[1], M, N));
  const T* A = a.value().data().data();
  const T* B = b.value().data().data();
  T* C = out.data().data();
  for (std::size_t bt = 0; bt < batches; ++bt) {
    const T* Ab = A + bt * M * K;
    const T* Bb = B + bt * K * N;
    T* Cb = C + bt * M * N;
    for (std::size_t i = 0; i < M; ++i) {
      if (transpose_b) {
        for (std::size_t j = 0; j < N; ++j) {
          T s{0};
          for (std::size_t k = 0; k < K; ++k) s += Ab[i * K + k] * Bb[j * K + k];
          Cb[i * N + j] = s;
        }
      } else {
        detail::combine(Ab + i * K, 1, Bb, N, K, Cb + i * N, N);
      }
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape<T>& t, std::span<const T> g) {
    const T* A = t.value(ia).data().data();
    const T* B = t.value(ib).data().data();
    auto ga = t.grad_buffer(ia);
    auto gb = t.grad_buffer(ib);
    for (std::size_t bt = 0; bt < batches; ++bt) {
      const T* Ab = A + bt * M * K;
      const T* Bb = B + bt * K * N;
      const T* Gb = g.data() + bt * M * N;
      T* gA = ga.empty() ? nullptr : ga.data() + bt * M * K;
      T* gB = gb.empty() ? nullptr : gb.data() + bt * K * N;
      if (transpose_b) {
        // B is (N, K): dA = G·B, dB = Gᵀ·A.
        if (gA)
          for (std::size_t i = 0; i < M; ++i) detail::combine(Gb + i * N, 1, Bb, K, N, gA + i * K, K);
        if (gB)
          for (std::size_t j = 0; j < N; ++j) detail::combine(Gb + j, N, Ab, K, M, gB + j * K, K);
      } else {
        // B is (K, N): dA = G·Bᵀ, dB = Aᵀ·G.
        if (gA)
          for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              T acc{0};
              for (std::size_t j = 0; j < N; ++j) acc += Gb[i * N + j] * Bb[k * N + j];
              gA[i * K + k] += acc;
            }
        if (gB)
          for (std::size_t k = 0; k < K; ++k) detail::combine(Ab + k, K, Gb, N, M, gB + k * N, N);
      }
    }
  });
}

/// Mean of each cell of a (rows × cols) grid: (N, C, H, W) -> (N, C, rows, cols).
template <class T>
Var<T> region_mean(const Var<T>& x, std::size_t rows, std::size_t cols) {
  const Shape xs = x.shape();
  require_shape(rows >= 1 && cols >= 1, "region_mean: empty grid");
  require_shape(xs[2] % rows == 0 && xs[3] % cols == 0,
                "region_mean: " + std::to_string(xs[2]) + "x" + std::to_string(xs[3]) +
                    " is not divisible by a " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  const std::size_t bh = xs[2] / rows, bw = xs[3] / cols, W = xs[3];
  const double cell = static_cast<double>(bh * bw);
  Tensor<T> out(Shape(xs[0], xs[1], rows, cols));
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t c = 0; c < xs[1]; ++c) {
      const T* p = xv.plane(n, c).data();
      for (std::size_t ry = 0; ry < rows; ++ry)
        for (std::size_t rx = 0; rx < cols; ++rx) {
          double s = 0.0;
          for (std::size_t i = 0; i < bh; ++i) s += detail::sum(p + (ry * bh + i) * W + rx * bw, bw);
          out(n, c, ry, rx) = static_cast<T>(s / cell);
        }
    }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    const T w = static_cast<T>(1.0 / cell);
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t c = 0; c < xs[1]; ++c)
        for (std::size_t ry = 0; ry < rows; ++ry)
          for (std::size_t rx = 0; rx < cols; ++rx) {
            const T gv = g[((n * xs[1] + c) * rows + ry) * cols + rx] * w;
            T* base = gx.data() + (n * xs[1] + c) * xs.plane();
            for (std::size_t i = 0; i < bh; ++i)
              for (std::size_t j = 0; j < bw; ++j) base[(ry * bh + i) * W + rx * bw + j] += gv;
          }
  });
}

/// Indices of the k largest entries of every last-axis row, by descending
/// score; equal scores resolve to the lower index. Not differentiable.
template <class T>
IndexTensor topk_lastdim(const Tensor<T>& scores, std::size_t k) {
  const Shape s = scores.shape();
  const std::size_t L = s[3];
  if (k < 1 || k > L)
    throw std::out_of_range("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(L) + "]");
  IndexTensor out(Shape(s[0], s[1], s[2], k));
  std::vector<std::size_t> order(L);
  const std::size_t rows = s.numel() / L;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = scores.data().data() + r * L;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k), order.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    std::copy_n(order.begin(), k, out.data.begin() + static_cast<long>(r * k));
  }
  return out;
}

/// Region-major gather. x is (groups, regions, tokens, dim); idx is
/// (groups, 1, query_regions, k). Output (groups, query_regions, k·tokens, dim)
/// concatenates the selected regions in index order. Backward scatter-adds.
template <class T>
Var<T> gather_regions(const Var<T>& x, const IndexTensor& idx) {
  const Shape xs = x.shape();
  const std::size_t G = xs[0], R = xs[1], Tk = xs[2], D = xs[3];
  require_shape(idx.shape[0] == G && idx.shape[1] == 1,
                "gather_regions: index shape " + idx.shape.str() + " does not match " + xs.str());
  const std::size_t Rq = idx.shape[2], K = idx.shape[3];
  for (std::size_t v : idx.data)
    if (v >= R) throw std::out_of_range("gather_regions: index " + std::to_string(v) + " >= " + std::to_string(R));
  const std::size_t block = Tk * D;
  Tensor<T> out(Shape(G, Rq, K * Tk, D));
  const T* src = x.value().data().data();
  T* dst = out.data().data();
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t q = 0; q < Rq; ++q)
      for (std::size_t j = 0; j < K; ++j) {
        const std::size_t r = idx(g, 0, q, j);
        std::copy_n(src + (g * R + r) * block, block, dst + ((g * Rq + q) * K + j) * block);
      }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> gr) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t q = 0; q < Rq; ++q)
        for (std::size_t j = 0; j < K; ++j) {
          const std::size_t r = idx(g, 0, q, j);
          const T* from = gr.data() + ((g * Rq + q) * K + j) * block;
          T* to = gx.data() + (g * R + r) * block;
          for (std::size_t i = 0; i < block; ++i) to[i] += from[i];
        }
  });
}

/// (groups·regions, C, h, w) -> (groups, regions, h·w, C): one token per pixel.
template <class T>
Var<T> blocks_to_tokens(const Var<T>& x, std::size_t regions) {
  const Shape xs = x.shape();
  require_shape(regions >= 1 && xs[0] % regions == 0, "blocks_to_tokens: batch not divisible by region count");
  const std::size_t C = xs[1], P = xs.plane();
  Tensor<T> out(Shape(xs[0] / regions, regions, P, C));
  const auto& xv = x.value();
  for (std::size_t b = 0; b < xs[0]; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.plane(b, c).data();
      T* dst = out.data().data() + b * P * C + c;
      for (std::size_t p = 0; p < P; ++p) dst[p * C] = src[p];
    }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t b = 0; b < xs[0]; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        T* dst = gx.data() + (b * C + c) * P;
        const T* src = g.data() + b * P * C + c;
        for (std::size_t p = 0; p < P; ++p) dst[p] += src[p * C];
      }
  });
}

/// Inverse of blocks_to_tokens.
template <class T>
Var<T> tokens_to_blocks(const Var<T>& x, std::size_t height, std::size_t width) {
  const Shape xs = x.shape();
  require_shape(xs[2] == height * width, "tokens_to_blocks: token count does not match block size");
  const std::size_t B = xs[0] * xs[1], C = xs[3], P = xs[2];
  Tensor<T> out(Shape(B, C, height, width));
  const auto& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.data().data() + b * P * C + c;
      T* dst = out.plane(b, c).data();
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p * C];
    }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c) {
        const T* src = g.data() + (b * C + c) * P;
        T* dst = gx.data() + b * P * C + c;
        for (std::size_t p = 0; p < P; ++p) dst[p * C] += src[p];
      }
  });
}

/// Adaptive average pooling to (out_h, out_w); bin i spans
/// [floor(i·H/out_h), ceil((i+1)·H/out_h)).
template <class T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape xs = x.shape();
  require_shape(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: empty output");
  const std::size_t H = xs[2], W = xs[3];
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out(Shape(xs[0], xs[1], out_h, out_w));
  const auto& xv = x.value();
  for (std::size_t n = 0; n < xs[0]; ++n)
    for (std::size_t c = 0; c < xs[1]; ++c) {
      const T* p = xv.plane(n, c).data();
      for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t y0 = lo(i, H, out_h), y1 = hi(i, H, out_h);
          const std::size_t x0 = lo(j, W, out_w), x1 = hi(j, W, out_w);
          double s = 0.0;
          for (std::size_t y = y0; y < y1; ++y) s += detail::sum(p + y * W + x0, x1 - x0);
          out(n, c, i, j) = static_cast<T>(s / static_cast<double>((y1 - y0) * (x1 - x0)));
        }
    }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t n = 0; n < xs[0]; ++n)
      for (std::size_t c = 0; c < xs[1]; ++c) {
        T* base = gx.data() + (n * xs[1] + c) * H * W;
        for (std::size_t i = 0; i < out_h; ++i)
          for (std::size_t j = 0; j < out_w; ++j) {
            const std::size_t y0 = lo(i, H, out_h), y1 = hi(i, H, out_h);
            const std::size_t x0 = lo(j, W, out_w), x1 = hi(j, W, out_w);
            const T share = g[((n * xs[1] + c) * out_h + i) * out_w + j] /
                            static_cast<T>((y1 - y0) * (x1 - x0));
            for (std::size_t y = y0; y < y1; ++y)
              for (std::size_t xx = x0; xx < x1; ++xx) base[y * W + xx] += share;
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Layout

/// Every (row, col) block of every channel map becomes its own batch entry:
/// (N, C, H, W) -> (N·C·rows·cols, 1, H/rows, W/cols). Entry index is
/// (n·C + c)·rows·cols + block_row·cols + block_col.
template <class T>
Var<T> to_batch(const Var<T>& x, std::size_t rows, std::size_t cols) {
  const Shape xs = x.shape();
  require_shape(rows >= 1 && cols >= 1, "to_batch: empty grid");
  require_shape(xs[2] % rows == 0 && xs[3] % cols == 0,
                "to_batch: " + std::to_string(xs[2]) + "x" + std::to_string(xs[3]) +
                    " is not divisible by a " + std::to_string(rows) + "x" + std::to_string(cols) + " grid");
  const std::size_t bh = xs[2] / rows, bw = xs[3] / cols, R = rows * cols, W = xs[3];
  Tensor<T> out(Shape(xs[0] * xs[1] * R, 1, bh, bw));
  const auto& xv = x.value();
  for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc) {
    const T* src = xv.data().data() + nc * xs.plane();
    for (std::size_t r = 0; r < R; ++r) {
      T* dst = out.data().data() + (nc * R + r) * bh * bw;
      const std::size_t oy = (r / cols) * bh, ox = (r % cols) * bw;
      for (std::size_t i = 0; i < bh; ++i) std::copy_n(src + (oy + i) * W + ox, bw, dst + i * bw);
    }
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc)
      for (std::size_t r = 0; r < R; ++r) {
        const T* src = g.data() + (nc * R + r) * bh * bw;
        const std::size_t oy = (r / cols) * bh, ox = (r % cols) * bw;
        T* dst = gx.data() + nc * xs.plane();
        for (std::size_t i = 0; i < bh; ++i)
          for (std::size_t j = 0; j < bw; ++j) dst[(oy + i) * W + ox + j] += src[i * bw + j];
      }
  });
}

/// Inverse of to_batch for single-channel block entries.
template <class T>
Var<T> from_batch(const Var<T>& x, std::size_t channels, std::size_t rows, std::size_t cols) {
  const Shape xs = x.shape();
  const std::size_t R = rows * cols;
  require_shape(xs[1] == 1, "from_batch: block entries must have one channel");
  require_shape(channels >= 1 && R >= 1 && xs[0] % (channels * R) == 0,
                "from_batch: batch " + std::to_string(xs[0]) + " is not a multiple of channels x regions");
  const std::size_t N = xs[0] / (channels * R), bh = xs[2], bw = xs[3], H = bh * rows, W = bw * cols;
  Tensor<T> out(Shape(N, channels, H, W));
  const auto& xv = x.value();
  for (std::size_t nc = 0; nc < N * channels; ++nc)
    for (std::size_t r = 0; r < R; ++r) {
      const T* src = xv.data().data() + (nc * R + r) * bh * bw;
      T* dst = out.data().data() + nc * H * W;
      const std::size_t oy = (r / cols) * bh, ox = (r % cols) * bw;
      for (std::size_t i = 0; i < bh; ++i) std::copy_n(src + i * bw, bw, dst + (oy + i) * W + ox);
    }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t nc = 0; nc < N * channels; ++nc)
      for (std::size_t r = 0; r < R; ++r) {
        T* dst = gx.data() + (nc * R + r) * bh * bw;
        const T* src = g.data() + nc * H * W;
        const std::size_t oy = (r / cols) * bh, ox = (r % cols) * bw;
        for (std::size_t i = 0; i < bh; ++i)
          for (std::size_t j = 0; j < bw; ++j) dst[i * bw + j] += src[(oy + i) * W + ox + j];
      }
  });
}

/// Channels [begin, begin+count) of x.
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape xs = x.shape();
  require_shape(begin + count <= xs[1] && count > 0, "slice_channels: range outside " + xs.str());
  const std::size_t P = xs.plane();
  Tensor<T> out(Shape(xs[0], count, xs[2], xs[3]));
  for (std::size_t n = 0; n < xs[0]; ++n)
    std::copy_n(x.value().data().data() + (n * xs[1] + begin) * P, count * P, out.data().data() + n * count * P);
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t n = 0; n < xs[0]; ++n) {
      T* dst = gx.data() + (n * xs[1] + begin) * P;
      const T* src = g.data() + n * count * P;
      for (std::size_t i = 0; i < count * P; ++i) dst[i] += src[i];
    }
  });
}

/// Splits (N, C, H, W) into C single-channel maps.
template <class T>
std::vector<Var<T>> chunk_channels(const Var<T>& x) {
  std::vector<Var<T>> maps;
  for (std::size_t c = 0; c < x.shape()[1]; ++c) maps.push_back(slice_channels(x, c, 1));
  return maps;
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  require_shape(as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3],
                "concat_channels: " + as.str() + " vs " + bs.str());
  const std::size_t P = as.plane(), Ca = as[1], Cb = bs[1];
  Tensor<T> out(Shape(as[0], Ca + Cb, as[2], as[3]));
  for (std::size_t n = 0; n < as[0]; ++n) {
    std::copy_n(a.value().data().data() + n * Ca * P, Ca * P, out.data().data() + n * (Ca + Cb) * P);
    std::copy_n(b.value().data().data() + n * Cb * P, Cb * P, out.data().data() + (n * (Ca + Cb) + Ca) * P);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [=](Tape<T>& t, std::span<const T> g) {
    auto ga = t.grad_buffer(ia);
    auto gb = t.grad_buffer(ib);
    for (std::size_t n = 0; n < as[0]; ++n) {
      const T* src = g.data() + n * (Ca + Cb) * P;
      if (!ga.empty())
        for (std::size_t i = 0; i < Ca * P; ++i) ga[n * Ca * P + i] += src[i];
      if (!gb.empty())
        for (std::size_t i = 0; i < Cb * P; ++i) gb[n * Cb * P + i] += src[Ca * P + i];
    }
  });
}

namespace detail {

/// Reflection without repeating the edge sample; falls back to replication
/// for single-sample axes.
inline std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (i < n) return i;
  if (n == 1) return 0;
  const std::size_t over = i - n + 1;
  return over < n ? n - 1 - over : 0;
}

}  // namespace detail

/// Reflect-pads the bottom and right edges.
template <class T>
Var<T> pad_reflect(const Var<T>& x, std::size_t bottom, std::size_t right) {
  const Shape xs = x.shape();
  const std::size_t H = xs[2], W = xs[3], Ho = H + bottom, Wo = W + right;
  require_shape(H > 0 && W > 0 && (bottom < H || H == 1) && (right < W || W == 1),
                "pad_reflect: padding must be smaller than the image");
  Tensor<T> out(Shape(xs[0], xs[1], Ho, Wo));
  for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc) {
    const T* src = x.value().data().data() + nc * H * W;
    T* dst = out.data().data() + nc * Ho * Wo;
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j)
        dst[i * Wo + j] = src[detail::reflect_index(i, H) * W + detail::reflect_index(j, W)];
  }
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j)
          gx[nc * H * W + detail::reflect_index(i, H) * W + detail::reflect_index(j, W)] +=
              g[nc * Ho * Wo + i * Wo + j];
  });
}

/// Top-left (height × width) window.
template <class T>
Var<T> crop(const Var<T>& x, std::size_t height, std::size_t width) {
  const Shape xs = x.shape();
  require_shape(height <= xs[2] && width <= xs[3], "crop: window larger than " + xs.str());
  Tensor<T> out(Shape(xs[0], xs[1], height, width));
  for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc)
    for (std::size_t i = 0; i < height; ++i)
      std::copy_n(x.value().data().data() + nc * xs.plane() + i * xs[3], width,
                  out.data().data() + (nc * height + i) * width);
  const std::size_t ix = x.id();
  return x.tape()->record(std::move(out), {x}, [=](Tape<T>& t, std::span<const T> g) {
    auto gx = t.grad_buffer(ix);
    for (std::size_t nc = 0; nc < xs[0] * xs[1]; ++nc)
      for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j)
          gx[nc * xs.plane() + i * xs[3] + j] += g[(nc * height + i) * width + j];
  });
}

}  // namespace lsnet

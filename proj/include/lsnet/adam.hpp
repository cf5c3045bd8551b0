#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "lsnet/tensor.hpp"

namespace lsnet {

struct AdamHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment buffers, one pair per parameter tensor.
template <class T>
struct AdamState {
  AdamHyper hyper;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;

  AdamState() = default;
  AdamState(AdamHyper h, std::span<const Tensor<T>> params) : hyper(h) {
    for (const auto& p : params) {
      m.emplace_back(p.shape());
      v.emplace_back(p.shape());
    }
  }
};

/// One bias-corrected Adam update, in place.
template <class T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state) {
  require_shape(params.size() == grads.size() && params.size() == state.m.size(),
                "adam_step: parameter, gradient, and state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    require_shape(params[i].shape() == grads[i].shape() && params[i].shape() == state.m[i].shape(),
                  "adam_step: shape mismatch at parameter " + std::to_string(i));
  ++state.step;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      p[j] = static_cast<T>(static_cast<double>(p[j]) - h.lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

}  // namespace lsnet

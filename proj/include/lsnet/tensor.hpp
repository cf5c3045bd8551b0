#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lsnet {

/// Raised when operand extents do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numeric sweep finds NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Four extents: batch, channel, height, width.
struct Shape {
  std::array<std::size_t, 4> dims{0, 0, 0, 0};

  constexpr Shape() = default;
  constexpr Shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : dims{n, c, h, w} {}

  constexpr std::size_t operator[](std::size_t i) const { return dims[i]; }
  constexpr std::size_t& operator[](std::size_t i) { return dims[i]; }
  constexpr std::size_t batch() const { return dims[0]; }
  constexpr std::size_t channels() const { return dims[1]; }
  constexpr std::size_t height() const { return dims[2]; }
  constexpr std::size_t width() const { return dims[3]; }
  constexpr std::size_t plane() const { return dims[2] * dims[3]; }
  constexpr std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '(' << dims[0] << ", " << dims[1] << ", " << dims[2] << ", " << dims[3] << ')';
    return os.str();
  }
};

/// Dense row-major 4-D array. Value semantics; gradients live on the tape.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    require_shape(data_.size() == shape_.numel(),
                  "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                      shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() & { return data_; }
  std::span<const T> data() const& { return data_; }
  std::span<const T> data() && = delete;  // would dangle
  const std::vector<T>& vec() const& { return data_; }
  std::vector<T> vec() && { return std::move(data_); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }

  /// Contiguous (height × width) plane of one (batch, channel) entry.
  std::span<T> plane(std::size_t n, std::size_t c) {
    return std::span<T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }
  std::span<const T> plane(std::size_t n, std::size_t c) const {
    return std::span<const T>(data_).subspan(offset(n, c, 0, 0), shape_.plane());
  }

  Tensor reshaped(Shape s) const {
    require_shape(s.numel() == shape_.numel(), "cannot reshape " + shape_.str() + " to " + s.str());
    return Tensor(s, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Integer companion of Tensor, used for detached top-k indices.
struct IndexTensor {
  Shape shape;
  std::vector<std::size_t> data;

  IndexTensor() = default;
  explicit IndexTensor(Shape s) : shape(s), data(s.numel(), 0) {}

  std::size_t& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  std::size_t operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  friend bool operator==(const IndexTensor&, const IndexTensor&) = default;
};

namespace detail {

/// Dot product with eight independent partial sums. The lane split keeps the
/// loop vectorizable without reassociation, so the result is deterministic.
template <class T>
double dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t u = 0; u < 8; ++u) lanes[u] += a[i + u] * b[i + u];
  double total = 0.0;
  for (std::size_t u = 0; u < 8; ++u) total += static_cast<double>(lanes[u]);
  for (; i < n; ++i) total += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return total;
}

template <class T>
double sum(const T* a, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t u = 0; u < 8; ++u) lanes[u] += a[i + u];
  double total = 0.0;
  for (std::size_t u = 0; u < 8; ++u) total += static_cast<double>(lanes[u]);
  for (; i < n; ++i) total += static_cast<double>(a[i]);
  return total;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// y[p] += Σ_c coef[c · coef_stride] · x[c · x_stride + p] for p < n. Pixels
/// are processed in register-sized blocks so y is loaded and stored once.
template <class T>
void combine(const T* coef, std::size_t coef_stride, const T* x, std::size_t x_stride, std::size_t count, T* y,
             std::size_t n) {
  constexpr std::size_t B = 16;
  std::size_t p = 0;
  for (; p + B <= n; p += B) {
    T acc[B];
    for (std::size_t u = 0; u < B; ++u) acc[u] = y[p + u];
    for (std::size_t c = 0; c < count; ++c) {
      const T w = coef[c * coef_stride];
      const T* xc = x + c * x_stride + p;
      for (std::size_t u = 0; u < B; ++u) acc[u] += w * xc[u];
    }
    for (std::size_t u = 0; u < B; ++u) y[p + u] = acc[u];
  }
  for (; p < n; ++p) {
    T acc = y[p];
    for (std::size_t c = 0; c < count; ++c) acc += coef[c * coef_stride] * x[c * x_stride + p];
    y[p] = acc;
  }
}

}  // namespace detail

}  // namespace lsnet

#pragma once

// Small building blocks shared by the backbone and the denoiser: affine maps,
// layer norm, and pointwise activations, each with an explicit backward.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vmar/kernels.hpp"
#include "vmar/tensor.hpp"

namespace vmar::nn {

// y = x W + b with W stored [in x out].
template <typename T>
struct Linear {
  Tensor<T> w;
  Tensor<T> b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : w({in, out}), b({out}) {}
  std::size_t in() const { return w.shape[0]; }
  std::size_t out() const { return w.shape[1]; }

  void forward(const T* x, T* y, std::size_t rows) const {
    kernels::matmul(x, w.ptr(), b.ptr(), y, rows, in(), out());
  }
  // Accumulates parameter gradients into `grad`; dx (if non-null) is accumulated too.
  void backward(const T* x, const T* dy, T* dx, Linear& grad, std::size_t rows) const {
    kernels::matmul_backward_weight(x, dy, grad.w.ptr(), grad.b.ptr(), rows, in(), out());
    if (dx) kernels::matmul_backward_input(dy, w.ptr(), dx, rows, in(), out());
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".b", b);
    f(prefix + ".w", w);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma({dim}), beta({dim}) {
    std::fill(gamma.data.begin(), gamma.data.end(), T(1));
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".beta", beta);
    f(prefix + ".gamma", gamma);
  }
};

inline constexpr double kLayerNormEps = 1e-6;

// Normalizes each row; writes xhat and rstd (per row). If ln is non-null the
// affine output goes to y, otherwise y may alias xhat.
template <typename T>
void layernorm_forward(const T* x, T* xhat, T* rstd, T* y, const LayerNorm<T>* ln,
                       std::size_t rows, std::size_t dim) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * dim;
    T mean = 0;
    for (std::size_t i = 0; i < dim; ++i) mean += xr[i];
    mean /= static_cast<T>(dim);
    T var = 0;
    for (std::size_t i = 0; i < dim; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(dim);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    T* xh = xhat + r * dim;
    for (std::size_t i = 0; i < dim; ++i) xh[i] = (xr[i] - mean) * rs;
    if (ln) {
      T* yr = y + r * dim;
      for (std::size_t i = 0; i < dim; ++i) yr[i] = xh[i] * ln->gamma.data[i] + ln->beta.data[i];
    }
  }
}

// dx += d/dx given dy at the (optionally affine) output.
template <typename T>
void layernorm_backward(const T* dy, const T* xhat, const T* rstd, const LayerNorm<T>* ln,
                        LayerNorm<T>* grad, T* dx, std::size_t rows, std::size_t dim) {
  std::vector<T> dxhat(dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * dim;
    const T* xh = xhat + r * dim;
    if (ln) {
      for (std::size_t i = 0; i < dim; ++i) {
        dxhat[i] = dyr[i] * ln->gamma.data[i];
        grad->gamma.data[i] += dyr[i] * xh[i];
        grad->beta.data[i] += dyr[i];
      }
    } else {
      for (std::size_t i = 0; i < dim; ++i) dxhat[i] = dyr[i];
    }
    T mean_d = 0, mean_dx = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      mean_d += dxhat[i];
      mean_dx += dxhat[i] * xh[i];
    }
    mean_d /= static_cast<T>(dim);
    mean_dx /= static_cast<T>(dim);
    T* dxr = dx + r * dim;
    for (std::size_t i = 0; i < dim; ++i) dxr[i] += rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
  }
}

template <typename T>
inline T silu(T x) {
  return x / (T(1) + std::exp(-x));
}
template <typename T>
inline T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

// tanh approximation of GELU.
template <typename T>
inline T gelu(T x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  const T u = static_cast<T>(k) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}
template <typename T>
inline T gelu_grad(T x) {
  constexpr double k = 0.7978845608028654;
  const T u = static_cast<T>(k) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = static_cast<T>(k) * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
void fill_xavier(Tensor<T>& w, Rng& rng) {
  const double fan_in = static_cast<double>(w.shape[0]);
  const double fan_out = static_cast<double>(w.shape[1]);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (T& v : w.data) v = static_cast<T>(rng.uniform(-a, a));
}

template <typename T>
void fill_normal(Tensor<T>& w, Rng& rng, double stddev) {
  for (T& v : w.data) v = static_cast<T>(stddev * rng.normal());
}

}  // namespace vmar::nn

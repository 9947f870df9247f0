#include "vmar/kernels.hpp"

namespace vmar::kernels::scalar {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void matmul(const T* x, const T* w, const T* bias, T* y, std::size_t rows, std::size_t in,
            std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * in;
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = bias ? bias[o] : T(0);
    for (std::size_t i = 0; i < in; ++i) {
      const T xi = xr[i];
      const T* wi = w + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
}

template <typename T>
void matmul_backward_input(const T* dy, const T* w, T* dx, std::size_t rows, std::size_t in,
                           std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy + r * out;
    T* dxr = dx + r * in;
    for (std::size_t i = 0; i < in; ++i) dxr[i] += dot(dyr, w + i * out, out);
  }
}

template <typename T>
void matmul_backward_weight(const T* x, const T* dy, T* dw, T* dbias, std::size_t rows,
                            std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x + r * in;
    const T* dyr = dy + r * out;
    for (std::size_t i = 0; i < in; ++i) axpy(xr[i], dyr, dw + i * out, out);
    if (dbias) axpy(T(1), dyr, dbias, out);
  }
}

#define VMAR_INSTANTIATE(T)                                                                   \
  template T dot<T>(const T*, const T*, std::size_t);                                         \
  template void axpy<T>(T, const T*, T*, std::size_t);                                        \
  template void matmul<T>(const T*, const T*, const T*, T*, std::size_t, std::size_t,         \
                          std::size_t);                                                       \
  template void matmul_backward_input<T>(const T*, const T*, T*, std::size_t, std::size_t,    \
                                         std::size_t);                                        \
  template void matmul_backward_weight<T>(const T*, const T*, T*, T*, std::size_t,            \
                                          std::size_t, std::size_t);

VMAR_INSTANTIATE(float)
VMAR_INSTANTIATE(double)
#undef VMAR_INSTANTIATE

}  // namespace vmar::kernels::scalar

#pragma once

// Inner-loop arithmetic shared by the backbone and the denoiser.
//
// Every kernel has a portable scalar reference and, for float, an AVX2/FMA
// variant picked at runtime. Results for one row never depend on how many
// rows are processed together, so incremental (cached) and full-sequence
// evaluation see the same per-row arithmetic.

#include <cstddef>
#include <string_view>

namespace vmar::kernels {

enum class Backend { Scalar, Avx2 };

bool avx2_available();
Backend active_backend();
// Throws ArgumentError when the requested backend is not available.
void set_backend(Backend backend);
// Best available backend, unless VMAR_KERNELS=scalar is set in the environment.
Backend default_backend();
std::string_view backend_name(Backend backend);

template <typename T>
T dot(const T* a, const T* b, std::size_t n);

// y += alpha * x
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);

// y[rows x out] = x[rows x in] * w[in x out] + bias (bias may be null)
template <typename T>
void matmul(const T* x, const T* w, const T* bias, T* y, std::size_t rows, std::size_t in,
            std::size_t out);

// dx[rows x in] += dy[rows x out] * w^T
template <typename T>
void matmul_backward_input(const T* dy, const T* w, T* dx, std::size_t rows, std::size_t in,
                           std::size_t out);

// dw[in x out] += x^T * dy, dbias[out] += column sums of dy (dbias may be null)
template <typename T>
void matmul_backward_weight(const T* x, const T* dy, T* dw, T* dbias, std::size_t rows,
                            std::size_t in, std::size_t out);

namespace scalar {
template <typename T>
T dot(const T* a, const T* b, std::size_t n);
template <typename T>
void axpy(T alpha, const T* x, T* y, std::size_t n);
template <typename T>
void matmul(const T* x, const T* w, const T* bias, T* y, std::size_t rows, std::size_t in,
            std::size_t out);
template <typename T>
void matmul_backward_input(const T* dy, const T* w, T* dx, std::size_t rows, std::size_t in,
                           std::size_t out);
template <typename T>
void matmul_backward_weight(const T* x, const T* dy, T* dw, T* dbias, std::size_t rows,
                            std::size_t in, std::size_t out);
}  // namespace scalar

#if defined(VMAR_HAVE_AVX2)
namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void matmul(const float* x, const float* w, const float* bias, float* y, std::size_t rows,
            std::size_t in, std::size_t out);
void matmul_backward_input(const float* dy, const float* w, float* dx, std::size_t rows,
                           std::size_t in, std::size_t out);
void matmul_backward_weight(const float* x, const float* dy, float* dw, float* dbias,
                            std::size_t rows, std::size_t in, std::size_t out);
}  // namespace avx2
#endif

}  // namespace vmar::kernels

// AVX2/FMA float kernels. Compiled with -mavx2 -mfma; only reached through the
// dispatcher after a CPUID check.

#include <immintrin.h>

#include "vmar/kernels.hpp"

namespace vmar::kernels::avx2 {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i + 8), _mm256_loadu_ps(b + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc0);
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Register-blocked over 32 output columns: each row accumulates in input order,
// independent of the row count.
void matmul(const float* x, const float* w, const float* bias, float* y, std::size_t rows,
            std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * in;
    float* yr = y + r * out;
    std::size_t o = 0;
    for (; o + 32 <= out; o += 32) {
      __m256 a0, a1, a2, a3;
      if (bias) {
        a0 = _mm256_loadu_ps(bias + o);
        a1 = _mm256_loadu_ps(bias + o + 8);
        a2 = _mm256_loadu_ps(bias + o + 16);
        a3 = _mm256_loadu_ps(bias + o + 24);
      } else {
        a0 = a1 = a2 = a3 = _mm256_setzero_ps();
      }
      const float* wp = w + o;
      for (std::size_t i = 0; i < in; ++i, wp += out) {
        const __m256 xi = _mm256_set1_ps(xr[i]);
        a0 = _mm256_fmadd_ps(xi, _mm256_loadu_ps(wp), a0);
        a1 = _mm256_fmadd_ps(xi, _mm256_loadu_ps(wp + 8), a1);
        a2 = _mm256_fmadd_ps(xi, _mm256_loadu_ps(wp + 16), a2);
        a3 = _mm256_fmadd_ps(xi, _mm256_loadu_ps(wp + 24), a3);
      }
      _mm256_storeu_ps(yr + o, a0);
      _mm256_storeu_ps(yr + o + 8, a1);
      _mm256_storeu_ps(yr + o + 16, a2);
      _mm256_storeu_ps(yr + o + 24, a3);
    }
    for (; o + 8 <= out; o += 8) {
      __m256 a0 = bias ? _mm256_loadu_ps(bias + o) : _mm256_setzero_ps();
      const float* wp = w + o;
      for (std::size_t i = 0; i < in; ++i, wp += out)
        a0 = _mm256_fmadd_ps(_mm256_set1_ps(xr[i]), _mm256_loadu_ps(wp), a0);
      _mm256_storeu_ps(yr + o, a0);
    }
    for (; o < out; ++o) {
      float acc = bias ? bias[o] : 0.0f;
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * w[i * out + o];
      yr[o] = acc;
    }
  }
}

void matmul_backward_input(const float* dy, const float* w, float* dx, std::size_t rows,
                           std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* dyr = dy + r * out;
    float* dxr = dx + r * in;
    for (std::size_t i = 0; i < in; ++i) dxr[i] += dot(dyr, w + i * out, out);
  }
}

void matmul_backward_weight(const float* x, const float* dy, float* dw, float* dbias,
                            std::size_t rows, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) {
    float* dwi = dw + i * out;
    std::size_t o = 0;
    for (; o + 32 <= out; o += 32) {
      __m256 a0 = _mm256_loadu_ps(dwi + o);
      __m256 a1 = _mm256_loadu_ps(dwi + o + 8);
      __m256 a2 = _mm256_loadu_ps(dwi + o + 16);
      __m256 a3 = _mm256_loadu_ps(dwi + o + 24);
      for (std::size_t r = 0; r < rows; ++r) {
        const __m256 xv = _mm256_set1_ps(x[r * in + i]);
        const float* d = dy + r * out + o;
        a0 = _mm256_fmadd_ps(xv, _mm256_loadu_ps(d), a0);
        a1 = _mm256_fmadd_ps(xv, _mm256_loadu_ps(d + 8), a1);
        a2 = _mm256_fmadd_ps(xv, _mm256_loadu_ps(d + 16), a2);
        a3 = _mm256_fmadd_ps(xv, _mm256_loadu_ps(d + 24), a3);
      }
      _mm256_storeu_ps(dwi + o, a0);
      _mm256_storeu_ps(dwi + o + 8, a1);
      _mm256_storeu_ps(dwi + o + 16, a2);
      _mm256_storeu_ps(dwi + o + 24, a3);
    }
    for (; o + 8 <= out; o += 8) {
      __m256 a0 = _mm256_loadu_ps(dwi + o);
      for (std::size_t r = 0; r < rows; ++r)
        a0 = _mm256_fmadd_ps(_mm256_set1_ps(x[r * in + i]), _mm256_loadu_ps(dy + r * out + o), a0);
      _mm256_storeu_ps(dwi + o, a0);
    }
    for (; o < out; ++o) {
      float acc = dwi[o];
      for (std::size_t r = 0; r < rows; ++r) acc += x[r * in + i] * dy[r * out + o];
      dwi[o] = acc;
    }
  }
  if (dbias) {
    for (std::size_t r = 0; r < rows; ++r) axpy(1.0f, dy + r * out, dbias, out);
  }
}

}  // namespace vmar::kernels::avx2

#include <cstdlib>
#include <cstring>

#include "vmar/errors.hpp"
#include "vmar/kernels.hpp"

namespace vmar::kernels {
namespace {

struct FloatTable {
  float (*dot)(const float*, const float*, std::size_t);
  void (*axpy)(float, const float*, float*, std::size_t);
  void (*matmul)(const float*, const float*, const float*, float*, std::size_t, std::size_t,
                 std::size_t);
  void (*matmul_backward_input)(const float*, const float*, float*, std::size_t, std::size_t,
                                std::size_t);
  void (*matmul_backward_weight)(const float*, const float*, float*, float*, std::size_t,
                                 std::size_t, std::size_t);
};

constexpr FloatTable kScalarTable{
    &scalar::dot<float>, &scalar::axpy<float>, &scalar::matmul<float>,
    &scalar::matmul_backward_input<float>, &scalar::matmul_backward_weight<float>};

#if defined(VMAR_HAVE_AVX2)
constexpr FloatTable kAvx2Table{&avx2::dot, &avx2::axpy, &avx2::matmul,
                                &avx2::matmul_backward_input, &avx2::matmul_backward_weight};
#endif

const FloatTable& table_for(Backend b) {
#if defined(VMAR_HAVE_AVX2)
  if (b == Backend::Avx2) return kAvx2Table;
#endif
  (void)b;
  return kScalarTable;
}

struct State {
  Backend backend;
  const FloatTable* table;
  State() : backend(default_backend()), table(&table_for(backend)) {}
};

State& state() {
  static State s;
  return s;
}

}  // namespace

bool avx2_available() {
#if defined(VMAR_HAVE_AVX2)
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok;
#else
  return false;
#endif
}

Backend default_backend() {
  const char* env = std::getenv("VMAR_KERNELS");
  if (env && std::strcmp(env, "scalar") == 0) return Backend::Scalar;
  return avx2_available() ? Backend::Avx2 : Backend::Scalar;
}

Backend active_backend() { return state().backend; }

void set_backend(Backend backend) {
  if (backend == Backend::Avx2 && !avx2_available())
    throw ArgumentError("AVX2 kernels are not available on this machine");
  state().backend = backend;
  state().table = &table_for(backend);
}

std::string_view backend_name(Backend backend) {
  return backend == Backend::Avx2 ? "avx2" : "scalar";
}

// float goes through the runtime table; double always takes the scalar path
// (it is only used for gradient verification).

template <>
float dot<float>(const float* a, const float* b, std::size_t n) {
  return state().table->dot(a, b, n);
}
template <>
double dot<double>(const double* a, const double* b, std::size_t n) {
  return scalar::dot(a, b, n);
}

template <>
void axpy<float>(float alpha, const float* x, float* y, std::size_t n) {
  state().table->axpy(alpha, x, y, n);
}
template <>
void axpy<double>(double alpha, const double* x, double* y, std::size_t n) {
  scalar::axpy(alpha, x, y, n);
}

template <>
void matmul<float>(const float* x, const float* w, const float* bias, float* y, std::size_t rows,
                   std::size_t in, std::size_t out) {
  state().table->matmul(x, w, bias, y, rows, in, out);
}
template <>
void matmul<double>(const double* x, const double* w, const double* bias, double* y,
                    std::size_t rows, std::size_t in, std::size_t out) {
  scalar::matmul(x, w, bias, y, rows, in, out);
}

template <>
void matmul_backward_input<float>(const float* dy, const float* w, float* dx, std::size_t rows,
                                  std::size_t in, std::size_t out) {
  state().table->matmul_backward_input(dy, w, dx, rows, in, out);
}
template <>
void matmul_backward_input<double>(const double* dy, const double* w, double* dx,
                                   std::size_t rows, std::size_t in, std::size_t out) {
  scalar::matmul_backward_input(dy, w, dx, rows, in, out);
}

template <>
void matmul_backward_weight<float>(const float* x, const float* dy, float* dw, float* dbias,
                                   std::size_t rows, std::size_t in, std::size_t out) {
  state().table->matmul_backward_weight(x, dy, dw, dbias, rows, in, out);
}
template <>
void matmul_backward_weight<double>(const double* x, const double* dy, double* dw, double* dbias,
                                    std::size_t rows, std::size_t in, std::size_t out) {
  scalar::matmul_backward_weight(x, dy, dw, dbias, rows, in, out);
}

}  // namespace vmar::kernels

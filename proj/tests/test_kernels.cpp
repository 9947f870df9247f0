#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "vmar/kernels.hpp"

namespace vmar::kernels {
namespace {

std::vector<float> randn(std::size_t n, std::mt19937& gen) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(gen);
  return v;
}

void expect_close(const std::vector<float>& a, const std::vector<float>& b, float tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    ASSERT_NEAR(a[i], b[i], tol * (1.0f + std::fabs(b[i]))) << "i=" << i;
}

struct Shape {
  std::size_t rows, in, out;
};

const Shape kShapes[] = {{1, 1, 1}, {3, 5, 7}, {7, 64, 64}, {17, 64, 192}, {5, 256, 64},
                         {2, 33, 65}, {64, 8, 64}, {9, 64, 8}};

#if defined(VMAR_HAVE_AVX2)

class Avx2Equivalence : public ::testing::TestWithParam<Shape> {
 protected:
  void SetUp() override {
    if (!avx2_available()) GTEST_SKIP() << "no AVX2 on this CPU";
  }
};

TEST_P(Avx2Equivalence, Matmul) {
  const Shape s = GetParam();
  std::mt19937 gen(1);
  auto x = randn(s.rows * s.in, gen), w = randn(s.in * s.out, gen), b = randn(s.out, gen);
  std::vector<float> y0(s.rows * s.out), y1(s.rows * s.out);
  scalar::matmul(x.data(), w.data(), b.data(), y0.data(), s.rows, s.in, s.out);
  avx2::matmul(x.data(), w.data(), b.data(), y1.data(), s.rows, s.in, s.out);
  expect_close(y1, y0, 1e-5f);
  scalar::matmul<float>(x.data(), w.data(), nullptr, y0.data(), s.rows, s.in, s.out);
  avx2::matmul(x.data(), w.data(), nullptr, y1.data(), s.rows, s.in, s.out);
  expect_close(y1, y0, 1e-5f);
}

TEST_P(Avx2Equivalence, BackwardInput) {
  const Shape s = GetParam();
  std::mt19937 gen(2);
  auto dy = randn(s.rows * s.out, gen), w = randn(s.in * s.out, gen);
  auto dx0 = randn(s.rows * s.in, gen);
  auto dx1 = dx0;
  scalar::matmul_backward_input(dy.data(), w.data(), dx0.data(), s.rows, s.in, s.out);
  avx2::matmul_backward_input(dy.data(), w.data(), dx1.data(), s.rows, s.in, s.out);
  expect_close(dx1, dx0, 1e-5f);
}

TEST_P(Avx2Equivalence, BackwardWeight) {
  const Shape s = GetParam();
  std::mt19937 gen(3);
  auto x = randn(s.rows * s.in, gen), dy = randn(s.rows * s.out, gen);
  auto dw0 = randn(s.in * s.out, gen), db0 = randn(s.out, gen);
  auto dw1 = dw0, db1 = db0;
  scalar::matmul_backward_weight(x.data(), dy.data(), dw0.data(), db0.data(), s.rows, s.in, s.out);
  avx2::matmul_backward_weight(x.data(), dy.data(), dw1.data(), db1.data(), s.rows, s.in, s.out);
  expect_close(dw1, dw0, 1e-5f);
  expect_close(db1, db0, 1e-5f);
}

TEST_P(Avx2Equivalence, DotAxpy) {
  const Shape s = GetParam();
  std::mt19937 gen(4);
  const std::size_t n = s.in * s.out;
  auto a = randn(n, gen), b = randn(n, gen);
  const float d0 = scalar::dot(a.data(), b.data(), n);
  const float d1 = avx2::dot(a.data(), b.data(), n);
  EXPECT_NEAR(d1, d0, 1e-4f * (1.0f + std::sqrt(static_cast<float>(n))));
  auto y0 = b, y1 = b;
  scalar::axpy(0.37f, a.data(), y0.data(), n);
  avx2::axpy(0.37f, a.data(), y1.data(), n);
  expect_close(y1, y0, 1e-6f);
}

INSTANTIATE_TEST_SUITE_P(Shapes, Avx2Equivalence, ::testing::ValuesIn(kShapes));

#endif

class RowIndependence : public ::testing::TestWithParam<Backend> {
 protected:
  void SetUp() override {
    if (GetParam() == Backend::Avx2 && !avx2_available()) GTEST_SKIP() << "no AVX2";
    set_backend(GetParam());
  }
  void TearDown() override { set_backend(default_backend()); }
};

TEST_P(RowIndependence, MatmulRowsMatchSingleRowCalls) {
  std::mt19937 gen(5);
  const std::size_t rows = 11, in = 64, out = 192;
  auto x = randn(rows * in, gen), w = randn(in * out, gen), b = randn(out, gen);
  std::vector<float> all(rows * out), one(out);
  matmul(x.data(), w.data(), b.data(), all.data(), rows, in, out);
  for (std::size_t r = 0; r < rows; ++r) {
    matmul(x.data() + r * in, w.data(), b.data(), one.data(), 1, in, out);
    for (std::size_t j = 0; j < out; ++j) ASSERT_EQ(all[r * out + j], one[j]);
  }
}

INSTANTIATE_TEST_SUITE_P(Backends, RowIndependence,
                         ::testing::Values(Backend::Scalar, Backend::Avx2));

TEST(Dispatch, DoubleUsesReference) {
  std::vector<double> x{1, 2}, w{1, 2, 3, 4, 5, 6}, y(3);
  matmul<double>(x.data(), w.data(), nullptr, y.data(), 1, 2, 3);
  EXPECT_EQ(y, (std::vector<double>{9, 12, 15}));
}

TEST(Dispatch, BackendNames) {
  EXPECT_EQ(backend_name(Backend::Scalar), "scalar");
  EXPECT_EQ(backend_name(Backend::Avx2), "avx2");
}

}  // namespace
}  // namespace vmar::kernels

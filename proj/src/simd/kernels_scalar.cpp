#include "slidevec/simd/kernels.hpp"

namespace slidevec::simd::detail {

namespace {

double sqdist_f32_f64(const float* x, const double* c, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - c[i];
    acc += d * d;
  }
  return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

const KernelTable scalar_table{&sqdist_f32_f64, &dot_f64, &axpy_f64};

}  // namespace slidevec::simd::detail

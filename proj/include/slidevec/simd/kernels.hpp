#pragma once

// Arithmetic inner loops shared by clustering and the classifiers.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant. The variant is chosen once at startup from CPUID and
// may be overridden with SLIDEVEC_SIMD=scalar|avx2. Variants agree to
// rounding (summation order differs); all callers accumulate in double.

#include <cstddef>
#include <span>
#include <string_view>

namespace slidevec::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
  // sum_i (x[i] - c[i])^2, x in float, c in double
  double (*sqdist_f32_f64)(const float* x, const double* c, std::size_t n);
  // sum_i a[i] * b[i]
  double (*dot_f64)(const double* a, const double* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);
};

std::string_view to_string(Isa isa) noexcept;
bool isa_supported(Isa isa) noexcept;

const KernelTable& table(Isa isa);

Isa active_isa() noexcept;
// Throws Error(unsupported) if the CPU lacks the requested ISA.
void set_active_isa(Isa isa);

const KernelTable& active() noexcept;

inline double sqdist(std::span<const float> x, std::span<const double> c) noexcept {
  return active().sqdist_f32_f64(x.data(), c.data(), x.size());
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  return active().dot_f64(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) noexcept {
  active().axpy_f64(alpha, x.data(), y.data(), x.size());
}

namespace detail {
extern const KernelTable scalar_table;
#if defined(SLIDEVEC_HAVE_AVX2)
extern const KernelTable avx2_table;
#endif
}  // namespace detail

}  // namespace slidevec::simd

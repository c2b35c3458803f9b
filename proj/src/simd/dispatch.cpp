#include <atomic>
#include <cstdlib>
#include <string>

#include "slidevec/error.hpp"
#include "slidevec/log.hpp"
#include "slidevec/simd/kernels.hpp"

namespace slidevec::simd {

namespace {

Isa detect() noexcept {
  Isa best = Isa::scalar;
  if (isa_supported(Isa::avx2)) best = Isa::avx2;
  if (const char* env = std::getenv("SLIDEVEC_SIMD")) {
    const std::string_view want(env);
    if (want == "scalar") return Isa::scalar;
    if (want == "avx2" && isa_supported(Isa::avx2)) return Isa::avx2;
    if (want != "avx2")
      log::warn("ignoring unknown SLIDEVEC_SIMD value '" + std::string(want) + "'");
  }
  return best;
}

std::atomic<Isa>& current() noexcept {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view to_string(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
  }
  return "unknown";
}

bool isa_supported(Isa isa) noexcept {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(SLIDEVEC_HAVE_AVX2)
      __builtin_cpu_init();
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(Isa isa) {
  if (!isa_supported(isa))
    throw Error(ErrorCode::unsupported, "SIMD variant not available: " + std::string(to_string(isa)));
#if defined(SLIDEVEC_HAVE_AVX2)
  if (isa == Isa::avx2) return detail::avx2_table;
#endif
  return detail::scalar_table;
}

Isa active_isa() noexcept { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  table(isa);
  current().store(isa, std::memory_order_relaxed);
}

const KernelTable& active() noexcept {
#if defined(SLIDEVEC_HAVE_AVX2)
  if (active_isa() == Isa::avx2) return detail::avx2_table;
#endif
  return detail::scalar_table;
}

}  // namespace slidevec::simd

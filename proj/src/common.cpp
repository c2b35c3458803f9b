#include <iostream>
#include <mutex>

#include "slidevec/error.hpp"
#include "slidevec/log.hpp"

namespace slidevec {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid argument";
    case ErrorCode::io: return "i/o error";
    case ErrorCode::bad_magic: return "bad magic";
    case ErrorCode::truncated: return "truncated payload";
    case ErrorCode::dim_mismatch: return "dimension mismatch";
    case ErrorCode::non_finite: return "non-finite value";
    case ErrorCode::mixed_dims: return "mixed feature dimensions";
    case ErrorCode::missing_label: return "missing label";
    case ErrorCode::empty_cohort: return "empty cohort";
    case ErrorCode::empty_slide: return "empty slide";
    case ErrorCode::shape_mismatch: return "shape mismatch";
    case ErrorCode::too_few_samples: return "too few samples";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::unsupported: return "unsupported";
  }
  return "unknown";
}

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::empty_slide:
    case ErrorCode::too_few_samples:
    case ErrorCode::non_finite:
      return 2;
    case ErrorCode::divergence:
      return 3;
    default:
      return 1;
  }
}

namespace log {

namespace {
std::mutex g_mutex;
Level g_level = Level::info;
}  // namespace

void set_level(Level level) {
  std::lock_guard lock(g_mutex);
  g_level = level;
}

void write(Level level, std::string_view message) {
  std::lock_guard lock(g_mutex);
  if (level < g_level) return;
  static constexpr const char* kTags[] = {"debug", "info", "warning", "error"};
  std::cerr << "slidevec: " << kTags[static_cast<int>(level)] << ": " << message << '\n';
}

}  // namespace log

}  // namespace slidevec

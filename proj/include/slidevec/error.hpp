#pragma once

#include <stdexcept>
#include <string>

namespace slidevec {

enum class ErrorCode {
  invalid_argument,
  io,
  bad_magic,
  truncated,
  dim_mismatch,
  non_finite,
  mixed_dims,
  missing_label,
  empty_cohort,
  empty_slide,
  shape_mismatch,
  too_few_samples,
  divergence,
  unsupported,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Process exit status for a failure of the given kind: 1 usage/IO,
// 2 data quality, 3 numeric failure.
int exit_code_for(ErrorCode code) noexcept;

}  // namespace slidevec

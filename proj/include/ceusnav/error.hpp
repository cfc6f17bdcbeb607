#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ceusnav {

enum class ErrorCode {
  invalid_transform,
  insufficient_data,
  degenerate_motion,
  domain,
  config,
  invalid_input,
  empty_voi,
  protocol,
  unsupported_version,
  framing,
  size,
  io,
  bind,
};

std::string_view to_string(ErrorCode code);

// All library failures are reported as ceusnav::Error; code() distinguishes
// the failure class so callers (and the CLI exit-code mapping) can branch.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ceusnav

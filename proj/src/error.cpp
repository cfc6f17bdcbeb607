#include "ceusnav/error.hpp"

namespace ceusnav {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_transform: return "invalid-transform";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::degenerate_motion: return "degenerate-motion";
    case ErrorCode::domain: return "domain";
    case ErrorCode::config: return "config";
    case ErrorCode::invalid_input: return "invalid-input";
    case ErrorCode::empty_voi: return "empty-voi";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::unsupported_version: return "unsupported-version";
    case ErrorCode::framing: return "framing";
    case ErrorCode::size: return "size";
    case ErrorCode::io: return "io";
    case ErrorCode::bind: return "bind";
  }
  return "unknown";
}

}  // namespace ceusnav

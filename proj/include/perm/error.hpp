#pragma once

#include <stdexcept>
#include <string>

namespace perm {

enum class ErrorCode {
  kDomain,
  kInvalidArgument,
  kDimensionMismatch,
  kInsufficientData,
  kNotTrained,
  kNumerical,
  kFormat,
  kVersion,
  kIo,
  kNotFound,
  kState,     // operation not allowed in the current protocol state
  kRejected,  // well-formed report that disagrees with the server's recomputation
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDomain: return "domain";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimensionMismatch: return "dimension_mismatch";
    case ErrorCode::kInsufficientData: return "insufficient_data";
    case ErrorCode::kNotTrained: return "not_trained";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kState: return "state";
    case ErrorCode::kRejected: return "rejected";
  }
  return "unknown";
}

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace perm

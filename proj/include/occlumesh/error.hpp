#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace occlumesh {

enum class ErrorCode {
  kShape,
  kInvalidArgument,
  kBehindCamera,
  kDegenerateCamera,
  kEmptyInput,
  kNonFinite,
  kRankDeficient,
  kUnknownPartId,
  kGraspFailure,
  kIo,
  kSchema,
  kConfig,
  kTape,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the library; the code is what the CLI reports.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace occlumesh

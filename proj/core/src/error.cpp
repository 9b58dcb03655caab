#include "motionrag/error.hpp"

namespace motionrag {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::usage:
      return "usage";
    case ErrorCode::data:
      return "data";
    case ErrorCode::invariant:
      return "invariant";
    case ErrorCode::numeric:
      return "numeric";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(message), code_(code) {}

void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace motionrag

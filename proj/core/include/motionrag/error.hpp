#pragma once

#include <stdexcept>
#include <string>

namespace motionrag {

// Values double as process exit codes for the command line tool.
enum class ErrorCode : int {
  usage = 2,
  data = 3,
  invariant = 4,
  numeric = 5,
};

const char* to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

}  // namespace motionrag

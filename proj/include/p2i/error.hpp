#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace p2i {

/// Error categories. The CLI prints them as `p2i: error[<code>]: <message>`.
enum class ErrorCode {
  kShape,
  kInvalidArgument,
  kIo,
  kFormat,
  kState,
};

std::string_view error_code_name(ErrorCode code);

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

}  // namespace p2i

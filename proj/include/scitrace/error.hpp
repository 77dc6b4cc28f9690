#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace scitrace {

enum class Errc {
  invalid_argument,
  invalid_key,
  conflict,
  not_found,
  permission_denied,
  missing_file,
  parse_error,
  malformed_traceparent,
  unknown_span,
  double_end,
  configuration,
  usage,
  io,
  invalid_range,
  schema,
  unavailable,
};

std::string_view to_string(Errc code);

// Every recoverable failure in the library is reported as an Error carrying a
// machine-checkable code; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace scitrace

#pragma once

#include <stdexcept>
#include <string>

namespace sslauth {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  out_of_range,
  config,
  not_found,
  parse,
  tamper,
  binding,
  protocol,
  numeric,
  io,
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::config: return "config";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::parse: return "parse";
    case ErrorCode::tamper: return "tamper";
    case ErrorCode::binding: return "binding";
    case ErrorCode::protocol: return "protocol";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace sslauth

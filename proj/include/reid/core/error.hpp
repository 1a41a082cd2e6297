#pragma once

#include <stdexcept>
#include <string>

namespace reid {

/// Coarse error categories; the CLI maps them onto distinct exit codes.
enum class ErrorKind {
  invalid_input = 2,
  io = 3,
  config = 4,
  numeric = 5,
  data = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid input";
    case ErrorKind::io: return "io";
    case ErrorKind::config: return "config";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::data: return "data";
  }
  return "unknown";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace reid

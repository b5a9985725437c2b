#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xkey {

enum class ErrorKind {
  io,
  format,
  invalid_argument,
  out_of_bounds,
  degenerate,
  infeasible,
  numeric,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::invalid_argument: return "invalid_argument";
    case ErrorKind::out_of_bounds: return "out_of_bounds";
    case ErrorKind::degenerate: return "degenerate";
    case ErrorKind::infeasible: return "infeasible";
    case ErrorKind::numeric: return "numeric";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` lets callers (and the CLI)
/// classify failures without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) throw Error(kind, message);
}

}  // namespace xkey

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace moe {

// Categories are stable: the CLI maps each one to its own exit code.
enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  SchemaMismatch,
  NonFinite,
  Degenerate,
  Io,
  BadMagic,
  VersionMismatch,
  Truncated,
  Format,
  Divergence,
};

std::string_view error_kind_name(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace moe

#include "moe/error.hpp"

namespace moe {

std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::SchemaMismatch: return "schema_mismatch";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::Degenerate: return "degenerate";
    case ErrorKind::Io: return "io";
    case ErrorKind::BadMagic: return "bad_magic";
    case ErrorKind::VersionMismatch: return "version_mismatch";
    case ErrorKind::Truncated: return "truncated";
    case ErrorKind::Format: return "format";
    case ErrorKind::Divergence: return "divergence";
  }
  return "unknown";
}

}  // namespace moe

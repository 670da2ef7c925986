#pragma once

#include <stdexcept>
#include <string>

namespace piattnp {

/// Bad or missing configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A referenced on-disk artifact is absent or unreadable (CLI exit code 3).
struct MissingArtifact : std::runtime_error {
  explicit MissingArtifact(const std::string& msg) : std::runtime_error(msg) {}
};

/// Base for numerical failures (CLI exit code 4).
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operand dimensions incompatible with the requested operation.
struct ShapeMismatch : NumericalError {
  explicit ShapeMismatch(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace piattnp

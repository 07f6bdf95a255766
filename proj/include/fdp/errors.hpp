#pragma once

#include <stdexcept>
#include <string>

namespace fdp {

/// Bad caller input: wrong dimensions, out-of-range steps, malformed bundles.
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A documented precondition on object state was violated (stepping a
/// finished episode, training a residual against an unfrozen base).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// A quantity left its numeric domain (non-finite loss, negative variance).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnsupportedTaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Wrong magic or version in a binary container.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// CRC mismatch or truncated payload.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A pipeline stage was asked to run before the artifact it consumes exists.
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Environment cannot produce usable demonstrations.
struct EnvironmentError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fdp

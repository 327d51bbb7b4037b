#pragma once

#include <stdexcept>
#include <string>

namespace exact {

// Error taxonomy shared by every subsystem. The CLI maps any of these to a
// nonzero exit with the message on stderr.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid dimensions, thresholds, or other bad configuration values.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed dataset content (out-of-range mask values, missing files).
struct DataError : Error {
  using Error::Error;
};

// Broken on-disk container: wrong magic, version, or truncated payload.
struct FormatError : Error {
  using Error::Error;
};

// Shape or precondition violation between in-process components.
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values or degenerate numeric input.
struct NumericError : Error {
  using Error::Error;
};

// Evaluation on empty or inconsistent statistics.
struct EvalError : Error {
  using Error::Error;
};

// Pseudo-label generation cannot proceed (e.g. missing prototype bank).
struct GenerationError : Error {
  using Error::Error;
};

}  // namespace exact

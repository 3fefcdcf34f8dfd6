#pragma once

#include <stdexcept>
#include <string>

namespace refuel {

/// Base of every error raised by the library. `kind()` is a stable short tag
/// used in structured diagnostics.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

/// Bad shapes, out-of-range indices, invalid parameters.
class InputError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "input"; }
};

/// Non-finite values or a failed factorization.
class NumericalError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numerical"; }
};

/// Environment or model-class generation ran out of retries.
class GenerationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "generation"; }
};

/// A family violates an assumption needed to compute its constants.
class ConstantsError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "constants"; }
};

/// Every candidate of the model class was eliminated by the data.
class MleError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "mle"; }
};

/// A persisted document carries an unsupported schema version.
class VersionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "version"; }
};

/// A persisted document is malformed or fails validation.
class SchemaError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "schema"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

}  // namespace refuel

#pragma once

#include <stdexcept>
#include <string>

namespace lhc {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes incompatible with the requested operation.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid hyperparameter / structural configuration (even pool size, bad head
// count, unsupported mode string, ...).
struct ConfigError : Error {
  using Error::Error;
};

// Malformed text input (CSV rows, key/value files, container manifests).
struct ParseError : Error {
  using Error::Error;
};

// Filesystem / stream failures.
struct IoError : Error {
  using Error::Error;
};

// Value outside its documented domain (negative pixel, label out of range).
struct ValueError : Error {
  using Error::Error;
};

}  // namespace lhc

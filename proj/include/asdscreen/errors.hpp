#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace asdscreen {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto its exit codes: validation 2, I/O 3, numerical 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Column or feature-code set does not match what was declared.
class SchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Malformed PGM/PPM payload.
class DecodeError : public ValidationError {
 public:
  DecodeError(const std::string& what, std::size_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Training preconditions violated (single-class data, empty sets).
class TrainingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Fusion inputs that do not cover the same subjects.
class PairingError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Loss became non-finite or exceeded the divergence bound.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, long step)
      : NumericalError(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace asdscreen

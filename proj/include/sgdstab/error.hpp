#pragma once

#include <stdexcept>
#include <string>

namespace sgdstab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on the arguments was violated (bad dimension, out-of-range
/// batch size, non-PSD input where PSD is required, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (instance files, gradients that do
/// not sum to zero, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An iterative method failed to converge, or a consistency assertion between
/// two algebraically equivalent computations was violated.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace sgdstab

#pragma once

#include <stdexcept>
#include <string>

namespace vessel3d {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Missing files, unwritable paths, short reads.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Input that violates a documented contract: bad headers, bad CSV rows,
/// dimension mismatches, inconsistent artifacts.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Optimizer breakdown (divergence, non-finite values).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vessel3d

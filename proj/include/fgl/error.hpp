#pragma once

#include <stdexcept>
#include <string>

namespace fgl {

// Root of every exception thrown by the library. The CLI maps the three
// families below onto its exit codes (usage 1, data 2, numeric 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid arguments, configuration or preconditions.
class UsageError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public UsageError {
 public:
  using UsageError::UsageError;
};

// I/O and file-format problems.
class DataError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public DataError {
 public:
  using DataError::DataError;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

// NaN/Inf, solver non-convergence, degenerate geometry.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace fgl

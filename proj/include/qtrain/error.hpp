#pragma once

#include <stdexcept>
#include <string>

namespace qtrain {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed graph: bad arity, unknown kind, dangling reference.
class GraphError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public GraphError {
 public:
  using GraphError::GraphError;
};

class CycleError : public GraphError {
 public:
  using GraphError::GraphError;
};

/// Calibration produced a non-finite value.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

class QuantizationError : public Error {
 public:
  using Error::Error;
};

/// Raised by the partitioner / bit-width assignment.
class CompileError : public Error {
 public:
  using Error::Error;
};

/// Fatal simulator condition: a ciphertext left its message space or a PBS
/// received a value outside its table domain. Always a compiler bug.
class SimError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace qtrain

#pragma once

#include <stdexcept>
#include <string>

namespace pcml {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand or argument dimensions do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf appeared in an intermediate value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// backward() on a graph whose leaves changed since the last forward pass.
class StaleGraphError : public Error {
 public:
  using Error::Error;
};

/// A factorization or KKT matrix could not be solved.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// A precondition or configured bound was violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An iterative process ran out of iterations or produced non-finite values.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Integration produced a non-finite state.
class BlowUpError : public Error {
 public:
  BlowUpError(const std::string& what, double time) : Error(what), time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

}  // namespace pcml

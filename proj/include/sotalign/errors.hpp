#ifndef SOTALIGN_ERRORS_HPP
#define SOTALIGN_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sotalign {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary container (magic, version, truncation, trailing bytes).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Well-formed container holding unusable values (NaN, Inf).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument value (non-positive temperature, count overflow, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Shapes of the operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A row whose norm is too small to define a direction.
class DegenerateRowError : public Error {
 public:
  explicit DegenerateRowError(std::size_t row)
      : Error("degenerate row " + std::to_string(row) + ": norm below 1e-12"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Covariance eigenvalue (after regularization) too small to invert.
class SingularityError : public Error {
 public:
  using Error::Error;
};

/// CKA is undefined when a centered kernel has zero norm.
class UndefinedCkaError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient during optimization.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace sotalign

#endif  // SOTALIGN_ERRORS_HPP

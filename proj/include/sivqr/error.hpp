#pragma once

#include <stdexcept>
#include <string>

namespace sivqr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid input: bad dimensions, out-of-range options, unreadable data.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A numerical routine could not produce a usable answer.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A design or instrument matrix is (numerically) rank deficient.
class RankDeficientError : public NumericalError {
 public:
  RankDeficientError(const std::string& what, long column)
      : NumericalError(what), column_(column) {}

  /// Zero-based index of the first column found to be linearly dependent
  /// on the columns before it.
  long column() const noexcept { return column_; }

 private:
  long column_;
};

}  // namespace sivqr

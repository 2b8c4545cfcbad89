#pragma once

#include <stdexcept>
#include <string>

namespace featcov {

/// Base for every error raised by the library. Messages are prefixed with
/// the module that raised them ("model: layer 2: ...").
class Error : public std::runtime_error {
public:
  Error(std::string module, const std::string &what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

  const std::string &module() const noexcept { return module_; }

private:
  std::string module_;
};

/// Malformed or inconsistent file contents.
class FormatError : public Error {
public:
  using Error::Error;
};

/// Tensor or vector dimensions that do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Numerical procedures that cannot deliver a result (rank deficiency,
/// non-convergence, zero-probability evidence, ...).
class NumericError : public Error {
public:
  using Error::Error;
};

/// Caller passed arguments outside an operation's domain.
class ArgumentError : public Error {
public:
  using Error::Error;
};

} // namespace featcov

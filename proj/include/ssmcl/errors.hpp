#pragma once

#include <stdexcept>
#include <string>

namespace ssmcl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand dimensions do not conform.
struct ShapeError : Error {
  using Error::Error;
};

// Iterative solver hit its iteration cap.
struct ConvergenceError : Error {
  using Error::Error;
};

// Argument outside the mathematical domain of an operation.
struct DomainError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed dataset or checkpoint file.
struct FormatError : Error {
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset(offset) {}
  std::size_t offset;
};

// Training produced a non-finite loss or parameter.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace ssmcl

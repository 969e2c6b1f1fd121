#pragma once

#include <stdexcept>
#include <string>

namespace grsn {

// Error taxonomy shared by the library and the CLI.  The CLI maps each
// category to a distinct process exit code, so library code should throw
// the most specific type that applies.

// Bad API usage or bad command-line/config values.  Exit code 2.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or incompatible data files (datasets, checkpoints).  Exit code 3.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure at runtime (NaN/Inf where finite values are required).
// Exit code 4.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatches are a kind of usage error; kept as a separate
// type so tests can assert the precise failure.
class ShapeError : public UsageError {
 public:
  explicit ShapeError(const std::string& msg) : UsageError(msg) {}
};

}  // namespace grsn

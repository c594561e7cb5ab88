#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace infodiff {

// Base of every error raised by the library. The CLI maps subclasses onto
// exit codes: NumericError -> 3, everything else -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not fit a primitive.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf showed up where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user data: empty corpus, unreadable file, misaligned inputs.
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid parameter combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible binary file. Carries the byte offset at which
// decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace infodiff

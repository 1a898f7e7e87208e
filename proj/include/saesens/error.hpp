#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace saesens {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. `offset` is the first byte that could not be parsed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

// Remote call failed. Carries enough metadata for the caller to decide on a retry.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int status, int attempts, bool retryable)
      : Error(what), status_(status), attempts_(attempts), retryable_(retryable) {}
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }
  bool retryable() const noexcept { return retryable_; }

 private:
  int status_;
  int attempts_;
  bool retryable_;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class AssemblyError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was invoked before the stage it depends on.
class ChainError : public Error {
 public:
  using Error::Error;
};

}  // namespace saesens

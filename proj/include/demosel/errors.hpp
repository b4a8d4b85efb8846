#pragma once

#include <stdexcept>
#include <string>

namespace demosel {

// Every failure the library reports derives from Error so callers can map
// categories onto exit codes without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class ExhaustedPoolError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values reached the optimizer or the loss.
class TrainingAbort : public Error {
 public:
  using Error::Error;
};

class BudgetExceeded : public Error {
 public:
  BudgetExceeded(const std::string& what, unsigned long long count)
      : Error(what), count_(count) {}
  unsigned long long count() const noexcept { return count_; }

 private:
  unsigned long long count_;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, unsigned long long offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  unsigned long long offset() const noexcept { return offset_; }

 private:
  unsigned long long offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace demosel

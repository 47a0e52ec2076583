#pragma once

#include <stdexcept>
#include <string>

namespace drq {

// Exit codes used by the command-line driver.
enum class ExitCode : int { ok = 0, config = 2, numerical = 3, infeasible = 4 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::config; }
};

// Tensor shapes that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API contract (stale cache, unknown bit-width, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf during training or estimation.
class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

class InfeasibleError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::infeasible; }
};

// Malformed checkpoint or dataset file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace drq

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace scaling_lab {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid construction parameters; the message names the offending field.
class ParameterError : public Error {
 public:
  ParameterError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Caller violated an operation's precondition (empty data, bad argument).
class UsageError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class InsufficientSamplesError : public Error {
 public:
  using Error::Error;
};

/// Experiment plan failed validation or an op precondition on the plan.
class PlanError : public Error {
 public:
  using Error::Error;
};

/// A statistic is undefined for the given data (e.g. zero noise power).
class EstimationError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergenceError : public Error {
 public:
  TrainingDivergenceError(std::int64_t step, double loss)
      : Error("training diverged at step " + std::to_string(step) +
              " (loss " + std::to_string(loss) + ")"),
        step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

/// An experiment as a whole failed (e.g. too many failed grid cells).
class ExperimentError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace scaling_lab

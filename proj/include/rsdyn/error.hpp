#pragma once

#include <stdexcept>
#include <string>

namespace rsdyn {

enum class ErrorKind {
  Io,
  Format,
  InvariantViolation,
  EmptyInput,
  Config,
  SequenceTooLong,
  LayerOutOfRange,
  InsufficientSamples,
  DegenerateInput,
  TooShort,
  UnitOutOfRange,
  DegenerateTrajectory,
  InfeasibleLadder,
  DimensionMismatch,
  NonFiniteLoss,
  DegenerateData,
  BadRange,
};

const char* to_string(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace rsdyn

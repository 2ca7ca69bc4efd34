#include "rsdyn/error.hpp"

namespace rsdyn {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return "IoError";
    case ErrorKind::Format: return "FormatError";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::EmptyInput: return "EmptyInput";
    case ErrorKind::Config: return "ConfigError";
    case ErrorKind::SequenceTooLong: return "SequenceTooLong";
    case ErrorKind::LayerOutOfRange: return "LayerOutOfRange";
    case ErrorKind::InsufficientSamples: return "InsufficientSamples";
    case ErrorKind::DegenerateInput: return "DegenerateInput";
    case ErrorKind::TooShort: return "TooShort";
    case ErrorKind::UnitOutOfRange: return "UnitOutOfRange";
    case ErrorKind::DegenerateTrajectory: return "DegenerateTrajectory";
    case ErrorKind::InfeasibleLadder: return "InfeasibleLadder";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::BadRange: return "BadRange";
  }
  return "Error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace rsdyn

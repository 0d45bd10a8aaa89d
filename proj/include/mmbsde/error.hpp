#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mmbsde {

enum class ErrorCode {
  InvalidArgument,
  NotSquare,
  NegativeRate,
  RowSumViolation,
  NotWeaklyIrreducible,
  DimensionMismatch,
  UnknownState,
  StepTooLarge,
  RegressionSingular,
  NoConvergence,
  RiccatiBlowup,
  OptimalityViolation,
  ZDependentDriver,
  JumpBudgetExceeded,
  CflViolation,
  NonEllipticSigma,
  ConfigInvalid,
  UnknownKind,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NotSquare: return "NotSquare";
    case ErrorCode::NegativeRate: return "NegativeRate";
    case ErrorCode::RowSumViolation: return "RowSumViolation";
    case ErrorCode::NotWeaklyIrreducible: return "NotWeaklyIrreducible";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::UnknownState: return "UnknownState";
    case ErrorCode::StepTooLarge: return "StepTooLarge";
    case ErrorCode::RegressionSingular: return "RegressionSingular";
    case ErrorCode::NoConvergence: return "NoConvergence";
    case ErrorCode::RiccatiBlowup: return "RiccatiBlowup";
    case ErrorCode::OptimalityViolation: return "OptimalityViolation";
    case ErrorCode::ZDependentDriver: return "ZDependentDriver";
    case ErrorCode::JumpBudgetExceeded: return "JumpBudgetExceeded";
    case ErrorCode::CflViolation: return "CFLViolation";
    case ErrorCode::NonEllipticSigma: return "NonEllipticSigma";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::UnknownKind: return "UnknownKind";
  }
  return "Unknown";
}

/// Library-wide exception; `code()` identifies the failed precondition.
class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

private:
  ErrorCode code_;
};

}  // namespace mmbsde

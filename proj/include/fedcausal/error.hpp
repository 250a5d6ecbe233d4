#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedcausal {

enum class ErrorCode {
  DimensionMismatch,
  EmptySite,
  InvalidTreatment,
  InvalidSiteLabel,
  NonFiniteValue,
  NonPositiveDefiniteCovariance,
  SingularHessian,
  InsufficientData,
  SingularCovariance,
  AllDensitiesZero,
  DivergenceDetected,
  EmptyGlobalArm,
  ZeroVariance,
  DivisionByZeroPropensity,
  MetaUndefined,
  TooManyFailedResamples,
  DegenerateFederation,
  ConfigError,
  IoError,
  InvalidArgument,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (the experiment runner in particular) can classify outcomes
/// without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace fedcausal

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace xspec {

enum class ErrorCode {
  NearInfinitePoint,
  DegenerateImageSize,
  ShapeMismatch,
  OutOfBounds,
  ZeroVariance,
  EmptyTargetSet,
  FrameMismatch,
  RankDeficient,
  InsufficientPoints,
  NoConsensus,
  SingularNormalEquations,
  NonInvertible,
  EmptyMatches,
  NonFinite,
  NonFiniteGradient,
  DivergenceDetected,
  ImageLoadError,
  InvalidConfig,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Exception type carrying a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace xspec

#include "xspec/error.hpp"

namespace xspec {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NearInfinitePoint: return "NearInfinitePoint";
    case ErrorCode::DegenerateImageSize: return "DegenerateImageSize";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
    case ErrorCode::EmptyTargetSet: return "EmptyTargetSet";
    case ErrorCode::FrameMismatch: return "FrameMismatch";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::InsufficientPoints: return "InsufficientPoints";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::SingularNormalEquations: return "SingularNormalEquations";
    case ErrorCode::NonInvertible: return "NonInvertible";
    case ErrorCode::EmptyMatches: return "EmptyMatches";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::DivergenceDetected: return "DivergenceDetected";
    case ErrorCode::ImageLoadError: return "ImageLoadError";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace xspec

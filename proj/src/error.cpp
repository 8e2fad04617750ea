#include "covsearch/error.hpp"

namespace covsearch {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kMissingFile: return "MissingFile";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kGroundTruthOutOfRange: return "GroundTruthOutOfRange";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kNonFiniteValue: return "NonFiniteValue";
    case ErrorCode::kZeroVector: return "ZeroVector";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kNotNormalized: return "NotNormalized";
    case ErrorCode::kKOutOfRange: return "KOutOfRange";
    case ErrorCode::kBatchTooSmall: return "BatchTooSmall";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kPointerOutOfBounds: return "PointerOutOfBounds";
    case ErrorCode::kEmptyList: return "EmptyList";
    case ErrorCode::kDuplicateQuery: return "DuplicateQuery";
    case ErrorCode::kTooLarge: return "TooLarge";
    case ErrorCode::kMissingGroundTruth: return "MissingGroundTruth";
    case ErrorCode::kKExceedsDepth: return "KExceedsDepth";
    case ErrorCode::kMismatchedRuns: return "MismatchedRuns";
  }
  return "Unknown";
}

}  // namespace covsearch

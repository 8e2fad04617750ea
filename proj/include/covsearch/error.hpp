#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace covsearch {

enum class ErrorCode {
  kMissingFile,
  kParseError,
  kDimensionMismatch,
  kGroundTruthOutOfRange,
  kIoError,
  kNonFiniteValue,
  kZeroVector,
  kInvalidConfig,
  kNotNormalized,
  kKOutOfRange,
  kBatchTooSmall,
  kNonFinite,
  kPointerOutOfBounds,
  kEmptyList,
  kDuplicateQuery,
  kTooLarge,
  kMissingGroundTruth,
  kKExceedsDepth,
  kMismatchedRuns,
};

std::string_view ErrorCodeName(ErrorCode code);

// All library failures are reported through this exception type. The code
// is stable and is what callers (and the CLI exit-code mapping) switch on.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace covsearch

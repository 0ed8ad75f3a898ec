#pragma once

#include <stdexcept>
#include <string>

namespace srlora {

enum class ErrorCode {
  NonConvergence,
  DimensionTooLarge,
  ZeroMatrix,
  ConstantInput,
  LengthMismatch,
  RankTooLarge,
  SpuDisabled,
  ShapeMismatch,
  MissingWeight,
  PlanMismatch,
  NonFiniteLoss,
  TapeConsumed,
  EmptyDataset,
  ManifestParse,
  OffsetOverlap,
  TruncatedPayload,
  UnknownDtype,
  NonFiniteTensor,
  ConfigError,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace srlora

#include "srlora/error.hpp"

namespace srlora {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonConvergence: return "NonConvergence";
    case ErrorCode::DimensionTooLarge: return "DimensionTooLarge";
    case ErrorCode::ZeroMatrix: return "ZeroMatrix";
    case ErrorCode::ConstantInput: return "ConstantInput";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::RankTooLarge: return "RankTooLarge";
    case ErrorCode::SpuDisabled: return "SpuDisabled";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingWeight: return "MissingWeight";
    case ErrorCode::PlanMismatch: return "PlanMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::TapeConsumed: return "TapeConsumed";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::ManifestParse: return "ManifestParse";
    case ErrorCode::OffsetOverlap: return "OffsetOverlap";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::UnknownDtype: return "UnknownDtype";
    case ErrorCode::NonFiniteTensor: return "NonFiniteTensor";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

}  // namespace srlora

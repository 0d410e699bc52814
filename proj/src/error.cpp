// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#include "stq/error.hpp"

namespace stq {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::OverflowRisk: return "OverflowRisk";
    case ErrorCode::NonPositiveScale: return "NonPositiveScale";
    case ErrorCode::EmptyCalibrationSet: return "EmptyCalibrationSet";
    case ErrorCode::StepCountMismatch: return "StepCountMismatch";
    case ErrorCode::UnknownLayer: return "UnknownLayer";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::InvalidPartition: return "InvalidPartition";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::MissingLayer: return "MissingLayer";
    case ErrorCode::PartitionMismatch: return "PartitionMismatch";
    case ErrorCode::ModelMismatch: return "ModelMismatch";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace stq

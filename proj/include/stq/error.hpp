// SPDX-FileCopyrightText: Copyright 2026 The stq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace stq {

enum class ErrorCode {
  InvalidInput,
  ShapeError,
  OverflowRisk,
  NonPositiveScale,
  EmptyCalibrationSet,
  StepCountMismatch,
  UnknownLayer,
  StepOutOfRange,
  InvalidPartition,
  InvalidConfig,
  MissingLayer,
  PartitionMismatch,
  ModelMismatch,
  FormatError,
  ChecksumMismatch,
  UnsupportedVersion,
  IoError,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure in the toolkit is reported as an Error carrying a code, so
/// front ends can map failure classes onto exit statuses.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace stq

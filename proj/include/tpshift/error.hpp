// Copyright (C) 2026 The tpshift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tpshift {

enum class ErrorCode {
    OutOfMemory,
    InvalidRange,
    IncompatibleLayouts,
    IndivisibleHeads,
    InsufficientStageBuffer,
    MisalignedWithoutPadding,
    ShapeMismatch,
    IncompatibleGroup,
    Unschedulable,
    ParseError,
    EmptyTrace,
    IoError,
    UsageError,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::OutOfMemory: return "OutOfMemory";
    case ErrorCode::InvalidRange: return "InvalidRange";
    case ErrorCode::IncompatibleLayouts: return "IncompatibleLayouts";
    case ErrorCode::IndivisibleHeads: return "IndivisibleHeads";
    case ErrorCode::InsufficientStageBuffer: return "InsufficientStageBuffer";
    case ErrorCode::MisalignedWithoutPadding: return "MisalignedWithoutPadding";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::IncompatibleGroup: return "IncompatibleGroup";
    case ErrorCode::Unschedulable: return "Unschedulable";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyTrace: return "EmptyTrace";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UsageError: return "UsageError";
    }
    return "Unknown";
}

/// Every failure the library reports carries one of the codes above so
/// callers (the simulator, the CLI) can branch on the kind without parsing text.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Parse failures remember the 1-based line they came from.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error(ErrorCode::ParseError, "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace tpshift
